#pragma once

#include "faststamp/fixed.hpp"
#include "faststamp/model.hpp"
#include "faststamp/transforms.hpp"

#include <json.hpp>

#include <stdexcept>
#include <string>

namespace faststamp {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Scalar loss settings as stored in the config document.
struct LossConfig {
  double c_p = 0.0;
  double c_m = 2.0;
  double image_weight_start = 0.0;
  double image_weight_end = 1.0;
  long image_ramp_iters = 0;
  double malicious_clamp = 0.5;
};

struct TrainSection {
  std::string mode = "robust";  // robust | semi_fragile
  int batch_size = 4;
  long iterations = 1000;
  double lr = 1.5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  long eval_every = 250;
  long log_every = 50;
  int workers = 0;
  LossConfig loss;
};

struct QuantSection {
  fixed::FixedSpec spec;  // Q6.10
  int tanh_lut_size = 1024;
  double tanh_lut_range = 4.0;
  int mac_chunk = 8;
};

struct PathsSection {
  std::string dataset_dir;
  std::string val_dir;
  std::string out_dir = ".";
};

/// One document configuring a run; schema-validated with unknown keys
/// rejected before anything executes.
struct RunConfig {
  int schema_version = 1;
  std::uint64_t seed = 1;
  std::string precision = "float32";  // float32 | float64
  ModelConfig model;
  TrainSection train;
  TransformDist benign;
  TransformDist malicious;
  std::vector<TransformRange> eval_bank;
  QuantSection quant;
  PathsSection paths;

  void validate() const;
};

RunConfig default_run_config();
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& c);

}  // namespace faststamp
