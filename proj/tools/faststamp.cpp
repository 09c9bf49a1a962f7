#include "faststamp/config.hpp"
#include "faststamp/dataflow.hpp"
#include "faststamp/image_io.hpp"
#include "faststamp/metrics.hpp"
#include "faststamp/quant_checkpoint.hpp"
#include "faststamp/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

using namespace faststamp;

namespace {

// exit codes: 0 ok, 2 usage, 3 config, 4 i/o, 5 runtime
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitIo = 4;
constexpr int kExitRuntime = 5;

void error_record(const std::string& kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

template <typename S>
std::vector<Tensor<S>> load_dataset_dir(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(dir))
    throw ImageIoError(ImageIoErrorKind::Io, "dataset directory not found: " + dir);
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    if (ext == ".png" || ext == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor<S>> out;
  for (const auto& p : files) out.push_back(image_to_tensor<S>(read_image(p.string())));
  return out;
}

template <typename S>
LossWeights<S> to_weights(const LossConfig& l) {
  LossWeights<S> w;
  w.c_p = static_cast<S>(l.c_p);
  w.c_m = static_cast<S>(l.c_m);
  w.image_weight_start = static_cast<S>(l.image_weight_start);
  w.image_weight_end = static_cast<S>(l.image_weight_end);
  w.image_ramp_iters = l.image_ramp_iters;
  w.malicious_clamp = static_cast<S>(l.malicious_clamp);
  return w;
}

TrainConfig to_train_config(const RunConfig& c) {
  TrainConfig t;
  t.mode = c.train.mode == "semi_fragile" ? TrainMode::SemiFragile : TrainMode::Robust;
  t.batch_size = c.train.batch_size;
  t.iterations = c.train.iterations;
  t.lr = c.train.lr;
  t.adam_beta1 = c.train.adam_beta1;
  t.adam_beta2 = c.train.adam_beta2;
  t.adam_eps = c.train.adam_eps;
  t.seed = c.seed;
  t.eval_every = c.train.eval_every;
  t.log_every = c.train.log_every;
  t.workers = c.train.workers;
  return t;
}

QuantizedEncoder load_encoder_for_fixed(const std::string& ckpt, const std::string& spec_name,
                                        const QuantSection& q) {
  if (checkpoint_is_quantized(ckpt)) {
    QuantizedEncoder enc = load_quantized_checkpoint(ckpt);
    if (!spec_name.empty() && fixed::FixedSpec::parse(spec_name) != enc.spec)
      throw ConfigError("requested spec " + spec_name + " does not match checkpoint spec " +
                        enc.spec.name());
    return enc;
  }
  auto params = load_checkpoint<float>(ckpt);
  fixed::FixedSpec spec = spec_name.empty() ? q.spec : fixed::FixedSpec::parse(spec_name);
  return quantize_encoder(params, spec, q.tanh_lut_size, q.tanh_lut_range, q.mac_chunk);
}

dataflow::Schedule schedule_from_name(const std::string& s) {
  if (s == "round_robin") return dataflow::Schedule::RoundRobin;
  if (s == "reverse") return dataflow::Schedule::ReverseRoundRobin;
  if (s == "random") return dataflow::Schedule::RandomPermutation;
  if (s == "topo") return dataflow::Schedule::TopoOrder;
  throw ConfigError("unknown schedule " + s + " (round_robin|reverse|random|topo)");
}

template <typename S>
int run_train(const RunConfig& cfg, const std::string& ckpt_out, const std::string& log_path) {
  TrainConfig t = to_train_config(cfg);
  t.checkpoint_path = ckpt_out;
  t.metrics_log_path = log_path;
  if (cfg.paths.dataset_dir.empty()) throw ConfigError("train: paths.dataset_dir is required");
  auto train_set = load_dataset_dir<S>(cfg.paths.dataset_dir);
  std::vector<Tensor<S>> val_set;
  if (!cfg.paths.val_dir.empty()) val_set = load_dataset_dir<S>(cfg.paths.val_dir);
  auto res = train_loop<S>(cfg.model, t, to_weights<S>(cfg.train.loss), cfg.benign,
                           cfg.malicious, cfg.eval_bank, train_set, val_set);
  if (ckpt_out.empty()) {
    std::cout << "training finished (no checkpoint path given; model not saved)\n";
  } else {
    std::cout << "best checkpoint written to " << ckpt_out << " (iter " << res.best_iter
              << ", benign BRA " << res.best_bra << "%)\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FastStamp watermarking engine"};
  app.require_subcommand(1);

  std::string config_path, image_path, out_path, ckpt_path, message_hex, spec_name;
  std::string report_path, images_dir, schedule_name = "round_robin", specs_csv, log_path;
  std::string mode_override, dataset_override, val_override;
  std::uint64_t seed = 0;
  long iterations_override = -1;
  bool use_dataflow = false, min_depths = false;

  auto* t_train = app.add_subcommand("train", "train a model per the run config");
  t_train->add_option("--config", config_path, "run config JSON")->required();
  t_train->add_option("--out", ckpt_path, "best-checkpoint output path");
  t_train->add_option("--log", log_path, "metrics log path (JSONL)");
  t_train->add_option("--mode", mode_override, "override train.mode");
  t_train->add_option("--iterations", iterations_override, "override train.iterations");
  auto* seed_opt = t_train->add_option("--seed", seed, "override seed");
  t_train->add_option("--dataset", dataset_override, "override paths.dataset_dir");
  t_train->add_option("--val", val_override, "override paths.val_dir");

  auto* t_embed = app.add_subcommand("embed", "embed a message into an image");
  t_embed->add_option("--image", image_path)->required();
  t_embed->add_option("--message", message_hex, "hex string of ceil(L/4) digits")->required();
  t_embed->add_option("--checkpoint", ckpt_path)->required();
  t_embed->add_option("--out", out_path)->required();
  t_embed->add_option("--fixed", spec_name, "run the fixed-point encoder (e.g. Q6.10)");
  t_embed->add_flag("--dataflow", use_dataflow, "use the streaming dataflow simulator");
  t_embed->add_option("--config", config_path, "run config (quantization defaults)");

  auto* t_extract = app.add_subcommand("extract", "recover the message from an image");
  t_extract->add_option("--image", image_path)->required();
  t_extract->add_option("--checkpoint", ckpt_path)->required();

  auto* t_eval = app.add_subcommand("eval", "metrics over a directory under the eval bank");
  t_eval->add_option("--config", config_path)->required();
  t_eval->add_option("--checkpoint", ckpt_path)->required();
  t_eval->add_option("--images", images_dir)->required();
  t_eval->add_option("--out", report_path, "JSONL report path");
  t_eval->add_option("--seed", seed);

  auto* t_quant = app.add_subcommand("quantize", "float checkpoint -> fixed checkpoint");
  t_quant->add_option("--checkpoint", ckpt_path)->required();
  t_quant->add_option("--out", out_path)->required();
  t_quant->add_option("--spec", spec_name, "Q-format, e.g. Q6.10");
  t_quant->add_option("--config", config_path, "run config (quantization defaults)");

  auto* t_sweep = app.add_subcommand("sweep", "bit-width design-space sweep");
  t_sweep->add_option("--checkpoint", ckpt_path)->required();
  t_sweep->add_option("--images", images_dir)->required();
  t_sweep->add_option("--specs", specs_csv, "comma-separated Q-formats")->required();
  t_sweep->add_option("--out", report_path, "JSONL report path");
  t_sweep->add_option("--config", config_path);
  t_sweep->add_option("--seed", seed);

  auto* t_flow = app.add_subcommand("dataflow-sim", "streaming encoder run with a FIFO report");
  t_flow->add_option("--image", image_path)->required();
  t_flow->add_option("--message", message_hex)->required();
  t_flow->add_option("--checkpoint", ckpt_path)->required();
  t_flow->add_option("--out", out_path, "watermarked image output");
  t_flow->add_option("--report", report_path, "run report JSONL path");
  t_flow->add_option("--spec", spec_name);
  t_flow->add_option("--schedule", schedule_name, "round_robin|reverse|random|topo");
  t_flow->add_option("--seed", seed);
  t_flow->add_flag("--min-depths", min_depths, "search minimal deadlock-free FIFO depths");
  t_flow->add_option("--config", config_path);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    error_record("usage", e.what());
    return kExitUsage;
  }

  try {
    RunConfig cfg = config_path.empty() ? default_run_config() : load_run_config(config_path);

    if (t_train->parsed()) {
      if (!mode_override.empty()) cfg.train.mode = mode_override;
      if (iterations_override > 0) cfg.train.iterations = iterations_override;
      if (seed_opt->count()) cfg.seed = seed;
      if (!dataset_override.empty()) cfg.paths.dataset_dir = dataset_override;
      if (!val_override.empty()) cfg.paths.val_dir = val_override;
      cfg.validate();
      return cfg.precision == "float64" ? run_train<double>(cfg, ckpt_path, log_path)
                                        : run_train<float>(cfg, ckpt_path, log_path);
    }

    if (t_embed->parsed()) {
      ImageU8 img = read_image(image_path);
      if (!spec_name.empty() || checkpoint_is_quantized(ckpt_path)) {
        QuantizedEncoder enc = load_encoder_for_fixed(ckpt_path, spec_name, cfg.quant);
        BitMessage msg = BitMessage::from_hex(message_hex, enc.config.message_bits);
        ImageU8 out;
        if (use_dataflow) {
          auto model = std::make_shared<const QuantizedEncoder>(std::move(enc));
          dataflow::StageGraph g = dataflow::build_pipeline(model);
          out = dataflow::run_streaming(g, img, msg, schedule_from_name(schedule_name), seed);
        } else {
          out = fixed_encoder_forward(enc, img, msg);
        }
        write_image(out_path, out);
      } else {
        if (use_dataflow)
          throw ConfigError("--dataflow requires the fixed-point path (--fixed)");
        auto params = load_checkpoint<float>(ckpt_path);
        BitMessage msg = BitMessage::from_hex(message_hex, params.config.message_bits);
        auto xw = encode(image_to_tensor<float>(img), msg, params);
        write_image(out_path, tensor_to_image(xw));
      }
      return 0;
    }

    if (t_extract->parsed()) {
      auto params = load_checkpoint<float>(ckpt_path);
      auto y = image_to_tensor<float>(read_image(image_path));
      auto soft = decode(y, params);
      BitMessage bits = hard_bits(soft);
      nlohmann::json j;
      j["message_hex"] = bits.to_hex();
      std::vector<double> conf;
      for (std::int64_t i = 0; i < soft.size(); ++i)
        conf.push_back(static_cast<double>(soft.value(i)));
      j["soft_bits"] = conf;
      std::cout << j.dump() << "\n";
      return 0;
    }

    if (t_eval->parsed()) {
      auto params = load_checkpoint<float>(ckpt_path);
      auto images = load_dataset_dir<float>(images_dir);
      if (images.empty()) throw ConfigError("eval: no images found in " + images_dir);
      std::ofstream report;
      if (!report_path.empty()) {
        report.open(report_path, std::ios::trunc);
        if (!report) throw ImageIoError(ImageIoErrorKind::Io, "cannot open " + report_path);
      }
      const auto& m = params.config;
      double psnr_acc = 0, ssim_acc = 0;
      std::vector<double> bra_acc(cfg.eval_bank.size(), 0.0);
      for (std::size_t i = 0; i < images.size(); ++i) {
        Rng rng(Rng::mix(cfg.seed + seed, 0xe5a1 + i));
        BitMessage msg = BitMessage::random(m.message_bits, rng);
        auto xw = encode(images[i], msg, params);
        double p = psnr_capped(psnr(images[i], xw));
        double s = ssim(images[i], xw);
        psnr_acc += p;
        ssim_acc += s;
        for (std::size_t e = 0; e < cfg.eval_bank.size(); ++e) {
          TransformDist single;
          single.entries = {cfg.eval_bank[e]};
          auto spec = sample_transform(single, m.height, m.width, rng);
          const Tensor<float>* patch = &images[(i + 1) % images.size()];
          auto yb = apply_transform(spec, xw, nullptr, patch);
          double b = bra(msg, decode(yb, params));
          bra_acc[e] += b;
          if (report)
            report << nlohmann::json{{"type", "eval_case"},
                                     {"image", i},
                                     {"transform", spec.name()},
                                     {"bra", b},
                                     {"psnr", p},
                                     {"ssim", s}}
                          .dump()
                   << "\n";
        }
      }
      MetricsReport summary;
      summary.psnr_db = psnr_acc / static_cast<double>(images.size());
      summary.ssim_val = ssim_acc / static_cast<double>(images.size());
      summary.bpp_val = bpp(m.message_bits, m.height, m.width, 3);
      double benign_sum = 0;
      int benign_n = 0;
      nlohmann::json per_transform = nlohmann::json::object();
      for (std::size_t e = 0; e < cfg.eval_bank.size(); ++e) {
        double v = bra_acc[e] / static_cast<double>(images.size());
        per_transform[transform_kind_name(cfg.eval_bank[e].kind)] = v;
        if (cfg.eval_bank[e].kind != TransformKind::LocalTamper) {
          benign_sum += v;
          ++benign_n;
        }
      }
      summary.bra_pct = benign_n ? benign_sum / benign_n : 0.0;
      summary.macs = mac_count(m);
      nlohmann::json sj = summary.to_json();
      sj["type"] = "summary";
      sj["bra_per_transform"] = per_transform;
      if (report) report << sj.dump() << "\n";
      std::cout << sj.dump(2) << "\n";
      return 0;
    }

    if (t_quant->parsed()) {
      auto params = load_checkpoint<float>(ckpt_path);
      fixed::FixedSpec spec =
          spec_name.empty() ? cfg.quant.spec : fixed::FixedSpec::parse(spec_name);
      QuantizedEncoder enc = quantize_encoder(params, spec, cfg.quant.tanh_lut_size,
                                              cfg.quant.tanh_lut_range, cfg.quant.mac_chunk);
      save_quantized_checkpoint(enc, out_path);
      std::cout << "quantized checkpoint (" << spec.name() << ") written to " << out_path
                << "\n";
      return 0;
    }

    if (t_sweep->parsed()) {
      auto params = load_checkpoint<float>(ckpt_path);
      auto images = load_dataset_dir<float>(images_dir);
      if (images.empty()) throw ConfigError("sweep: no images found in " + images_dir);
      std::vector<fixed::FixedSpec> specs;
      std::stringstream ss(specs_csv);
      std::string item;
      while (std::getline(ss, item, ',')) specs.push_back(fixed::FixedSpec::parse(item));
      std::vector<BitMessage> msgs;
      Rng rng(Rng::mix(cfg.seed + seed, 0x5111));
      for (std::size_t i = 0; i < images.size(); ++i)
        msgs.push_back(BitMessage::random(params.config.message_bits, rng));
      auto rows = bitwidth_sweep(params, images, msgs, specs, cfg.quant.tanh_lut_size,
                                 cfg.quant.tanh_lut_range, cfg.quant.mac_chunk);
      std::ofstream report;
      if (!report_path.empty()) report.open(report_path, std::ios::trunc);
      std::printf("%-8s %8s %8s %8s\n", "spec", "BRA%", "PSNR", "SSIM");
      for (const auto& r : rows) {
        if (report) report << r.to_json().dump() << "\n";
        std::printf("%-8s %8.2f %8.2f %8.4f\n", r.spec.name().c_str(), r.bra_pct,
                    psnr_capped(r.psnr_db), r.ssim_val);
      }
      return 0;
    }

    if (t_flow->parsed()) {
      QuantizedEncoder encv = load_encoder_for_fixed(ckpt_path, spec_name, cfg.quant);
      auto model = std::make_shared<const QuantizedEncoder>(std::move(encv));
      ImageU8 img = read_image(image_path);
      BitMessage msg = BitMessage::from_hex(message_hex, model->config.message_bits);
      dataflow::StageGraph g = dataflow::build_pipeline(model);
      if (min_depths) {
        auto caps = dataflow::min_fifo_depths(g, img, msg);
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [id, cap] : caps)
          j[g.fifos[static_cast<std::size_t>(id)].name] = cap;
        std::cout << nlohmann::json{{"type", "min_fifo_depths"}, {"depths", j}}.dump(2) << "\n";
      }
      dataflow::RunReport rep;
      ImageU8 out =
          dataflow::run_streaming(g, img, msg, schedule_from_name(schedule_name), seed, &rep);
      dataflow::verify_conservation(rep);
      if (!out_path.empty()) write_image(out_path, out);
      if (!report_path.empty()) {
        std::ofstream f(report_path, std::ios::trunc);
        for (const auto& s : rep.stages)
          f << nlohmann::json{{"record", "stage"}, {"id", s.id},       {"name", s.name},
                              {"kind", s.kind},    {"consumed", s.consumed},
                              {"produced", s.produced}}
                   .dump()
            << "\n";
        for (const auto& fr : rep.fifos)
          f << nlohmann::json{{"record", "fifo"},          {"id", fr.id},
                              {"name", fr.name},           {"capacity", fr.capacity},
                              {"pushed", fr.pushed},       {"popped", fr.popped},
                              {"high_water", fr.high_water}, {"lead", fr.lead}}
                   .dump()
            << "\n";
      }
      std::cout << "streamed " << rep.stages.size() << " stages, " << rep.fifos.size()
                << " fifos in " << rep.sweeps << " sweeps\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    error_record("config", e.what());
    return kExitConfig;
  } catch (const ImageIoError& e) {
    error_record("io", e.what());
    return kExitIo;
  } catch (const CheckpointError& e) {
    error_record(e.kind == CheckpointErrorKind::Io ? "io" : "checkpoint", e.what());
    return e.kind == CheckpointErrorKind::Io ? kExitIo : kExitRuntime;
  } catch (const std::invalid_argument& e) {
    error_record("usage", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    error_record("runtime", e.what());
    return kExitRuntime;
  }
  return 0;
}
