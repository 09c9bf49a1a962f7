#pragma once

#include "faststamp/adam.hpp"
#include "faststamp/checkpoint.hpp"
#include "faststamp/losses.hpp"
#include "faststamp/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace faststamp {

struct TrainConfig {
  TrainMode mode = TrainMode::Robust;
  int batch_size = 8;
  long iterations = 1000;
  double lr = 1.5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  long eval_every = 500;  // 0 disables periodic evaluation
  long log_every = 50;
  int workers = 0;  // 0 = hardware concurrency
  std::string metrics_log_path;  // optional JSONL sink
  std::string checkpoint_path;   // optional best-by-validation checkpoint

  void validate() const {
    if (iterations <= 0) throw std::invalid_argument("train: iterations must be > 0");
    if (!(lr > 0)) throw std::invalid_argument("train: learning rate must be > 0");
    if (batch_size <= 0) throw std::invalid_argument("train: batch size must be > 0");
  }
};

/// Per-transform evaluation summary.
struct EvalEntry {
  std::string name;
  bool malicious = false;
  double bra_pct = 0;
};

struct EvalSummary {
  double psnr_db = 0;
  double ssim_val = 0;
  std::vector<EvalEntry> entries;
  double benign_bra = 0;  // mean over benign entries (checkpoint-selection metric)
};

template <typename S>
struct TrainResult {
  ModelParams<S> params;       // final
  ModelParams<S> best_params;  // best by validation benign BRA (ties: PSNR)
  long best_iter = -1;
  double best_bra = -1;
  double best_psnr = -1;
  std::vector<nlohmann::json> log;
};

/// Evaluates the model on held-out images under the given transform bank.
/// Deterministic for a fixed seed.
template <typename S>
EvalSummary evaluate_model(const ModelParams<S>& params, const std::vector<Tensor<S>>& images,
                           const std::vector<TransformRange>& eval_bank, std::uint64_t seed) {
  if (images.empty()) throw std::invalid_argument("evaluate_model: no images");
  EvalSummary out;
  out.entries.resize(eval_bank.size());
  for (std::size_t e = 0; e < eval_bank.size(); ++e) {
    TransformDist single;
    single.entries = {eval_bank[e]};
    out.entries[e].malicious = eval_bank[e].kind == TransformKind::LocalTamper;
    out.entries[e].name = transform_kind_name(eval_bank[e].kind);
  }

  const int H = params.config.height, W = params.config.width;
  double psnr_acc = 0, ssim_acc = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng rng(Rng::mix(seed, 0xe7a1 + i));
    BitMessage msg = BitMessage::random(params.config.message_bits, rng);
    auto xw = encode(images[i], msg, params);
    psnr_acc += psnr_capped(psnr(images[i], xw));
    if (H >= 11 && W >= 11) ssim_acc += ssim(images[i], xw);
    for (std::size_t e = 0; e < eval_bank.size(); ++e) {
      TransformDist single;
      single.entries = {eval_bank[e]};
      auto spec = sample_transform(single, H, W, rng);
      const Tensor<S>* patch = &images[(i + 1) % images.size()];
      auto y = apply_transform(spec, xw, nullptr, patch);
      out.entries[e].bra_pct += bra(msg, decode(y, params));
    }
  }
  out.psnr_db = psnr_acc / static_cast<double>(images.size());
  out.ssim_val = (H >= 11 && W >= 11)
                     ? ssim_acc / static_cast<double>(images.size())
                     : std::numeric_limits<double>::quiet_NaN();
  int benign_n = 0;
  for (auto& e : out.entries) {
    e.bra_pct /= static_cast<double>(images.size());
    if (!e.malicious) {
      out.benign_bra += e.bra_pct;
      ++benign_n;
    }
  }
  if (benign_n) out.benign_bra /= benign_n;
  return out;
}

namespace detail {

template <typename S>
struct ItemResult {
  std::vector<ArrayX<S>> grads;  // per learnable, in store order
  LossDiagnostics diag;
  BnStatsSink<S> stats;
  bool finite = true;
};

/// Forward/backward for one batch item on a private tape and a private view
/// of the parameters (tensor handles share storage; tape bookkeeping is
/// per-copy).
template <typename S>
ItemResult<S> run_item(const ModelParams<S>& shared, const Tensor<S>& x, const BitMessage& msg,
                       const Tensor<S>& patch, TrainMode mode, const TransformDist& benign,
                       const TransformDist& malicious, const LossWeights<S>& weights, long iter,
                       std::uint64_t item_seed) {
  ModelParams<S> local = shared;
  GradTape<S> tape;
  std::vector<int> learnable_idx;
  for (std::size_t k = 0; k < local.store.size(); ++k) {
    auto& item = local.store.items()[k];
    if (item.learnable) {
      tape.watch(item.tensor);
      learnable_idx.push_back(static_cast<int>(k));
    }
  }
  Rng rng(item_seed);
  ItemResult<S> out;
  auto s_true = msg.to_tensor<S>();
  auto xw = encode(x, msg, local, &tape, BnMode::Train, &out.stats);
  const int H = local.config.height, W = local.config.width;
  auto gb = sample_transform(benign, H, W, rng);
  auto xb = apply_transform(gb, xw, &tape);
  auto sb = decode(xb, local, &tape, BnMode::Train, &out.stats);

  S l1 = 0, l2 = 0;
  auto li = loss_image(x, xw, weights, &tape, &l1, &l2);
  Tensor<S> lm;
  if (mode == TrainMode::SemiFragile) {
    auto gm = sample_transform(malicious, H, W, rng);
    auto xm = apply_transform(gm, xw, &tape, &patch);
    auto sm = decode(xm, local, &tape, BnMode::Train, &out.stats);
    lm = loss_message_semifragile(s_true, sb, sm, weights.malicious_clamp, &tape);
    out.diag.bra_malicious = bra(msg, sm);
    out.diag.has_malicious = true;
  } else {
    lm = loss_message_robust(s_true, sb, &tape);
  }
  auto loss =
      add(scale(li, weights.image_weight(iter), &tape), scale(lm, weights.c_m, &tape), &tape);

  out.diag.l1_img = static_cast<double>(l1);
  out.diag.l2_img = static_cast<double>(l2);
  out.diag.l_msg = static_cast<double>(lm.value(0));
  out.diag.total = static_cast<double>(loss.value(0));
  out.diag.bra_benign = bra(msg, sb);
  out.finite = std::isfinite(out.diag.total);
  if (!out.finite) return out;

  auto grads = backward(tape, loss);
  out.grads.reserve(learnable_idx.size());
  for (int k : learnable_idx)
    out.grads.push_back(grads.grad(local.store.items()[static_cast<std::size_t>(k)].tensor));
  return out;
}

}  // namespace detail

/// Mini-batch training loop: seeded batch sampling, per-item forward/backward
/// (optionally on worker threads, reduced in item order), one Adam step per
/// iteration, periodic held-out evaluation with best-checkpoint tracking.
template <typename S>
TrainResult<S> train_loop(const ModelConfig& mcfg, const TrainConfig& tcfg,
                          const LossWeights<S>& weights, const TransformDist& benign,
                          const TransformDist& malicious,
                          const std::vector<TransformRange>& eval_bank,
                          const std::vector<Tensor<S>>& train_images,
                          const std::vector<Tensor<S>>& val_images) {
  tcfg.validate();
  weights.validate();
  benign.validate();
  if (tcfg.mode == TrainMode::SemiFragile) malicious.validate();
  if (train_images.empty()) throw std::invalid_argument("train: dataset is empty");
  if (static_cast<int>(train_images.size()) < tcfg.batch_size)
    throw std::invalid_argument("train: dataset smaller than one batch");

  TrainResult<S> res;
  res.params = init_params<S>(tcfg.seed, mcfg);

  std::vector<std::string> learnable_names;
  for (const auto& it : res.params.store.items())
    if (it.learnable) learnable_names.push_back(it.name);
  std::vector<AdamState<S>> adam(learnable_names.size());
  AdamConfig<S> acfg;
  acfg.lr = static_cast<S>(tcfg.lr);
  acfg.beta1 = static_cast<S>(tcfg.adam_beta1);
  acfg.beta2 = static_cast<S>(tcfg.adam_beta2);
  acfg.eps = static_cast<S>(tcfg.adam_eps);

  std::ofstream log_file;
  if (!tcfg.metrics_log_path.empty()) {
    log_file.open(tcfg.metrics_log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("train: cannot open metrics log " + tcfg.metrics_log_path);
  }
  auto emit = [&](nlohmann::json j) {
    if (log_file) log_file << j.dump() << "\n";
    res.log.push_back(std::move(j));
  };

  const int B = tcfg.batch_size;
  int workers = tcfg.workers > 0 ? tcfg.workers
                                 : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min(workers, B));

  for (long iter = 0; iter < tcfg.iterations; ++iter) {
    // seeded batch selection and per-item streams
    Rng brng(Rng::mix(Rng::mix(tcfg.seed, 0xba7c), static_cast<std::uint64_t>(iter)));
    std::vector<int> idx(static_cast<std::size_t>(B));
    std::vector<BitMessage> msgs;
    for (int i = 0; i < B; ++i) {
      idx[static_cast<std::size_t>(i)] =
          brng.uniform_int(0, static_cast<int>(train_images.size()) - 1);
      msgs.push_back(BitMessage::random(mcfg.message_bits, brng));
    }

    std::vector<detail::ItemResult<S>> items(static_cast<std::size_t>(B));
    auto run_range = [&](int from, int to) {
      for (int i = from; i < to; ++i) {
        const auto& x = train_images[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        const auto& patch =
            train_images[static_cast<std::size_t>(idx[static_cast<std::size_t>((i + 1) % B)])];
        std::uint64_t item_seed =
            Rng::mix(Rng::mix(tcfg.seed, static_cast<std::uint64_t>(iter) * 1315423911ULL),
                     static_cast<std::uint64_t>(i));
        items[static_cast<std::size_t>(i)] =
            detail::run_item(res.params, x, msgs[static_cast<std::size_t>(i)], patch, tcfg.mode,
                             benign, malicious, weights, iter, item_seed);
      }
    };
    if (workers == 1) {
      run_range(0, B);
    } else {
      std::vector<std::thread> pool;
      int per = (B + workers - 1) / workers;
      for (int w = 0; w < workers; ++w) {
        int from = w * per, to = std::min(B, (w + 1) * per);
        if (from < to) pool.emplace_back(run_range, from, to);
      }
      for (auto& t : pool) t.join();
    }

    // deterministic ordered reduction
    LossDiagnostics diag;
    BnStatsSink<S> all_stats;
    std::vector<ArrayX<S>> grad_sum;
    for (int i = 0; i < B; ++i) {
      auto& it = items[static_cast<std::size_t>(i)];
      if (!it.finite) {
        std::ostringstream os;
        os << "train: non-finite loss at iteration " << iter << ", batch item " << i
           << " (image index " << idx[static_cast<std::size_t>(i)] << ")";
        throw std::runtime_error(os.str());
      }
      diag.l1_img += it.diag.l1_img;
      diag.l2_img += it.diag.l2_img;
      diag.l_msg += it.diag.l_msg;
      diag.total += it.diag.total;
      diag.bra_benign += it.diag.bra_benign;
      diag.bra_malicious += it.diag.bra_malicious;
      diag.has_malicious = diag.has_malicious || it.diag.has_malicious;
      if (grad_sum.empty()) {
        grad_sum = std::move(it.grads);
      } else {
        for (std::size_t k = 0; k < grad_sum.size(); ++k) grad_sum[k] += it.grads[k];
      }
      for (auto& st : it.stats) all_stats.push_back(std::move(st));
    }
    diag.l1_img /= B;
    diag.l2_img /= B;
    diag.l_msg /= B;
    diag.total /= B;
    diag.bra_benign /= B;
    diag.bra_malicious /= B;

    update_running_stats(res.params, all_stats);

    std::size_t k = 0;
    for (auto& item : res.params.store.items()) {
      if (!item.learnable) continue;
      ArrayX<S> g = grad_sum[k] / static_cast<S>(B);
      adam_step(item.tensor, g, adam[k], acfg);
      ++k;
    }

    if (tcfg.log_every > 0 && (iter % tcfg.log_every == 0 || iter + 1 == tcfg.iterations)) {
      nlohmann::json j{{"type", "train"},       {"iter", iter},
                       {"loss", diag.total},    {"l1_img", diag.l1_img},
                       {"l2_img", diag.l2_img}, {"l_msg", diag.l_msg},
                       {"bra_benign", diag.bra_benign}};
      if (diag.has_malicious) j["bra_malicious"] = diag.bra_malicious;
      emit(std::move(j));
    }

    const bool last = iter + 1 == tcfg.iterations;
    if (!val_images.empty() && tcfg.eval_every > 0 &&
        ((iter + 1) % tcfg.eval_every == 0 || last)) {
      auto ev = evaluate_model(res.params, val_images, eval_bank,
                               Rng::mix(tcfg.seed, 0xe5a1));
      nlohmann::json j{{"type", "eval"},
                       {"iter", iter},
                       {"psnr", ev.psnr_db},
                       {"benign_bra", ev.benign_bra}};
      if (std::isfinite(ev.ssim_val)) j["ssim"] = ev.ssim_val;
      for (const auto& e : ev.entries) j["bra_" + e.name] = e.bra_pct;
      emit(std::move(j));
      if (ev.benign_bra > res.best_bra ||
          (ev.benign_bra == res.best_bra && ev.psnr_db > res.best_psnr)) {
        res.best_bra = ev.benign_bra;
        res.best_psnr = ev.psnr_db;
        res.best_iter = iter;
        res.best_params = res.params;
        if (!tcfg.checkpoint_path.empty()) save_checkpoint(res.best_params, tcfg.checkpoint_path);
      }
    }
  }
  if (res.best_iter < 0) {
    res.best_params = res.params;
    if (!tcfg.checkpoint_path.empty()) save_checkpoint(res.best_params, tcfg.checkpoint_path);
  }
  return res;
}

}  // namespace faststamp
