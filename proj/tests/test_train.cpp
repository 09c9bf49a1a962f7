#include "faststamp/train.hpp"

#include <doctest.h>

#include "testutil.hpp"

#include <cmath>

using namespace faststamp;
using testutil::gradient_check;
using testutil::synthetic_image;

namespace {

ModelConfig fd_micro_config() {
  ModelConfig c;
  c.height = c.width = 8;
  c.message_bits = 4;
  c.secret_h = c.secret_w = 2;
  c.enc_channels = {4};
  c.enc_strides = {2};
  c.enc_up_channels = {4};
  c.dec_channels = {4};
  c.dec_strides = {2};
  c.dec_up_channels = {4};
  return c;
}

TransformDist smooth_benign_bank() {
  TransformDist d;
  TransformRange blur;
  blur.kind = TransformKind::GaussianBlur;
  blur.sigma = {0.6, 1.0};
  blur.ksize = 3;
  TransformRange color;
  color.kind = TransformKind::ColorContrast;
  d.entries = {blur, color};
  return d;
}

TransformDist tamper_bank(TamperFill fill) {
  TransformDist d;
  TransformRange t;
  t.kind = TransformKind::LocalTamper;
  t.area = {0.15, 0.3};
  t.fills = {fill};
  d.entries = {t};
  return d;
}

TransformDist identity_bank() {
  TransformDist d;
  TransformRange e;
  e.kind = TransformKind::Identity;
  d.entries = {e};
  return d;
}

}  // namespace

TEST_CASE("loss_image examples") {
  LossWeights<double> w;
  auto x = synthetic_image<double>(1, 8, 8);
  CHECK(loss_image(x, x, w).value(0) == 0.0);

  Tensor<double> shifted(x.shape(), (x.array() * 0.0 + 0.1).eval());
  Tensor<double> zero(x.shape(), (x.array() * 0.0).eval());
  double l1 = 0, l2 = 0;
  auto total = loss_image(zero, shifted, w, nullptr, &l1, &l2);
  CHECK(l1 == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(l2 == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(total.value(0) == doctest::Approx(0.11).epsilon(1e-12));

  // symmetric in its arguments
  auto y = synthetic_image<double>(2, 8, 8);
  CHECK(loss_image(x, y, w).value(0) == loss_image(y, x, w).value(0));

  CHECK_THROWS_AS(loss_image(x, Tensor<double>::zeros({3, 8, 9}), w), std::invalid_argument);

  // perceptual hook contributes only when registered with c_p > 0
  LossWeights<double> wp;
  wp.c_p = 2.0;
  wp.perceptual_hook = [](const Tensor<double>&, const Tensor<double>&, GradTape<double>*) {
    return Tensor<double>::full({1}, 0.25);
  };
  CHECK(loss_image(x, y, wp).value(0) ==
        doctest::Approx(loss_image(x, y, w).value(0) + 0.5).epsilon(1e-12));
}

TEST_CASE("loss_message examples") {
  auto s = Tensor<double>::from_values({2}, {1, 0});

  CHECK(loss_message_robust(s, s).value(0) == 0.0);
  auto half = Tensor<double>::full({2}, 0.5);
  CHECK(loss_message_robust(s, half).value(0) == doctest::Approx(0.5));
  auto soft = Tensor<double>::from_values({2}, {0.8, 0.1});
  CHECK(loss_message_robust(s, soft).value(0) == doctest::Approx(0.15));
  CHECK_THROWS_AS(loss_message_robust(s, Tensor<double>::zeros({3})), std::invalid_argument);

  // semi-fragile: perfect benign bits, chance-level malicious bits, clamp 0.5
  auto sm_chance = Tensor<double>::full({2}, 0.5);
  CHECK(loss_message_semifragile(s, s, sm_chance, 0.5).value(0) == doctest::Approx(-0.5));

  // benign and malicious terms cancel when equal and below the clamp
  auto sb = Tensor<double>::from_values({2}, {0.9, 0.2});
  CHECK(loss_message_semifragile(s, sb, sb, 0.5).value(0) == doctest::Approx(0.0));

  // malicious error beyond the clamp leaves the loss unchanged
  auto sm1 = Tensor<double>::from_values({2}, {0.3, 0.7});  // L1 = 0.7
  auto sm2 = Tensor<double>::from_values({2}, {0.1, 0.9});  // L1 = 0.9
  double v1 = loss_message_semifragile(s, sb, sm1, 0.5).value(0);
  double v2 = loss_message_semifragile(s, sb, sm2, 0.5).value(0);
  CHECK(v1 == v2);
}

TEST_CASE("loss weights ramp") {
  LossWeights<double> w;
  w.image_weight_start = 0.0;
  w.image_weight_end = 1.0;
  w.image_ramp_iters = 100;
  CHECK(w.image_weight(0) == 0.0);
  CHECK(w.image_weight(50) == doctest::Approx(0.5));
  CHECK(w.image_weight(100) == 1.0);
  CHECK(w.image_weight(5000) == 1.0);

  LossWeights<double> bad;
  bad.c_m = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("total_loss with c_m = 0 reduces to the ramped image loss") {
  auto cfg = fd_micro_config();
  auto p = init_params<double>(3, cfg);
  auto x = synthetic_image<double>(4, 8, 8);
  Rng mrng(5);
  BitMessage msg = BitMessage::random(4, mrng);

  LossWeights<double> w;
  w.c_m = 0.0;
  w.image_weight_start = w.image_weight_end = 1.0;

  Rng rng(6);
  auto r = total_loss<double>({x}, {msg}, p, TrainMode::Robust, identity_bank(), identity_bank(),
                              w, 0, rng);
  auto xw = encode(x, msg, p, nullptr, BnMode::Train);
  double l1 = 0, l2 = 0;
  loss_image(x, xw, w, nullptr, &l1, &l2);
  CHECK(r.loss.value(0) == doctest::Approx(l1 + l2).epsilon(1e-10));
  CHECK(r.diag.l1_img == doctest::Approx(l1));
  CHECK(r.diag.l2_img == doctest::Approx(l2));
  CHECK(r.diag.bra_benign >= 0.0);
  CHECK(r.diag.total == doctest::Approx(r.loss.value(0)));
}

TEST_CASE("composed total_loss gradient matches finite differences (micro model)") {
  auto cfg = fd_micro_config();
  auto base = init_params<double>(11, cfg);
  auto x = synthetic_image<double>(12, 8, 8);
  Rng mrng(13);
  BitMessage msg = BitMessage::random(4, mrng);

  std::vector<Tensor<double>> inputs;
  std::vector<std::size_t> slots;
  for (std::size_t k = 0; k < base.store.size(); ++k)
    if (base.store.items()[k].learnable) {
      inputs.push_back(base.store.items()[k].tensor);
      slots.push_back(k);
    }

  LossWeights<double> w;
  w.c_m = 2.0;
  w.image_weight_start = w.image_weight_end = 1.0;
  w.malicious_clamp = 0.7;  // keep the clamp kink away from the untrained ~0.5 error

  auto benign = smooth_benign_bank();
  auto malicious = tamper_bank(TamperFill::MeanColor);

  for (TrainMode mode : {TrainMode::Robust, TrainMode::SemiFragile}) {
    auto res = gradient_check(
        inputs,
        [&, mode](const std::vector<Tensor<double>>& in, GradTape<double>* tape) {
          ModelParams<double> p = base;
          for (std::size_t k = 0; k < slots.size(); ++k)
            p.store.items()[slots[k]].tensor = in[k];
          Rng rng(777);
          auto r = total_loss<double>({x}, {msg}, p, mode, benign, malicious, w, 10, rng, tape,
                                      BnMode::Train);
          return r.loss;
        },
        1e-5, 1e-3);
    CAPTURE(res.max_rel);
    CHECK(res.max_rel < 1e-3);
  }
}

TEST_CASE("train_loop rejects bad datasets and NaN losses") {
  auto cfg = fd_micro_config();
  TrainConfig t;
  t.iterations = 3;
  t.batch_size = 2;
  t.workers = 1;
  t.eval_every = 0;
  LossWeights<float> w;
  auto benign = identity_bank();

  std::vector<Tensor<float>> empty;
  CHECK_THROWS_AS(
      (train_loop<float>(cfg, t, w, benign, benign, {}, empty, empty)),
      std::invalid_argument);

  std::vector<Tensor<float>> one{synthetic_image<float>(1, 8, 8)};
  CHECK_THROWS_AS(
      (train_loop<float>(cfg, t, w, benign, benign, {}, one, {})),
      std::invalid_argument);

  // a NaN pixel poisons the loss; the loop aborts naming the batch position
  std::vector<Tensor<float>> bad{synthetic_image<float>(1, 8, 8),
                                 synthetic_image<float>(2, 8, 8)};
  bad[1].array_mut()[5] = std::numeric_limits<float>::quiet_NaN();
  bool threw = false;
  try {
    train_loop<float>(cfg, t, w, benign, benign, {}, bad, {});
  } catch (const std::exception& e) {
    threw = true;
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    CHECK(std::string(e.what()).find("iteration") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("train_loop is deterministic for a fixed seed") {
  auto cfg = fd_micro_config();
  TrainConfig t;
  t.iterations = 6;
  t.batch_size = 2;
  t.workers = 2;
  t.log_every = 1;
  t.eval_every = 3;
  t.seed = 99;
  LossWeights<float> w;
  w.image_ramp_iters = 4;
  auto benign = smooth_benign_bank();
  auto malicious = tamper_bank(TamperFill::MeanColor);
  std::vector<Tensor<float>> train{synthetic_image<float>(1, 8, 8),
                                   synthetic_image<float>(2, 8, 8),
                                   synthetic_image<float>(3, 8, 8)};
  std::vector<Tensor<float>> val{synthetic_image<float>(9, 8, 8)};
  std::vector<TransformRange> eval_bank;
  TransformRange ident;
  ident.kind = TransformKind::Identity;
  eval_bank.push_back(ident);

  auto r1 = train_loop<float>(cfg, t, w, benign, malicious, eval_bank, train, val);
  auto r2 = train_loop<float>(cfg, t, w, benign, malicious, eval_bank, train, val);
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i)
    CHECK(r1.log[i].dump() == r2.log[i].dump());

  // and bit-identical final parameters
  for (std::size_t k = 0; k < r1.params.store.size(); ++k) {
    const auto& a = r1.params.store.items()[k].tensor;
    const auto& b = r2.params.store.items()[k].tensor;
    CHECK((a.array() == b.array()).all());
  }
}

TEST_CASE("single-image overfit drives the image loss down (c_m = 0)") {
  auto cfg = fd_micro_config();
  TrainConfig t;
  t.iterations = 400;
  t.batch_size = 1;
  t.workers = 1;
  t.lr = 1e-3;
  t.log_every = 1;
  t.eval_every = 0;
  t.seed = 7;
  LossWeights<float> w;
  w.c_m = 0.0;
  w.image_weight_start = w.image_weight_end = 1.0;
  auto benign = identity_bank();
  std::vector<Tensor<float>> train{synthetic_image<float>(42, 8, 8)};

  auto r = train_loop<float>(cfg, t, w, benign, benign, {}, train, {});
  std::vector<double> losses;
  for (const auto& j : r.log)
    if (j["type"] == "train") losses.push_back(j["loss"].get<double>());
  REQUIRE(losses.size() >= 200);
  double head = 0, tail = 0;
  for (int i = 0; i < 100; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 100 + static_cast<std::size_t>(i)];
  }
  CHECK(tail / 100.0 < head / 100.0);
}
