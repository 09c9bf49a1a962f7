#include "faststamp/config.hpp"

#include <fstream>
#include <set>

namespace faststamp {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key \"" + it.key() + "\" in " + where);
}

template <typename T>
void opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::array<double, 2> range2(const nlohmann::json& v, const std::string& where) {
  if (v.is_number()) return {v.get<double>(), v.get<double>()};
  if (v.is_array() && v.size() == 2)
    return {v[0].get<double>(), v[1].get<double>()};
  throw ConfigError("config: " + where + " must be a number or [lo, hi]");
}

TamperFill fill_from_name(const std::string& s) {
  if (s == "patch") return TamperFill::Patch;
  if (s == "blur") return TamperFill::Blur;
  if (s == "mean_color") return TamperFill::MeanColor;
  throw ConfigError("config: unknown tamper fill \"" + s + "\"");
}

std::string fill_name(TamperFill f) {
  switch (f) {
    case TamperFill::Patch: return "patch";
    case TamperFill::Blur: return "blur";
    case TamperFill::MeanColor: return "mean_color";
  }
  return "?";
}

TransformRange transform_range_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown(j, {"kind", "weight", "quality", "sigma", "ksize", "brightness", "contrast",
                     "saturation", "hue", "presets", "area", "fills", "subsample_420"},
                 where);
  TransformRange e;
  try {
    e.kind = transform_kind_from_name(j.at("kind").get<std::string>());
  } catch (const std::invalid_argument& err) {
    throw ConfigError(std::string("config: ") + err.what());
  }
  opt(j, "weight", e.weight);
  if (j.contains("quality")) {
    auto r = range2(j["quality"], where + ".quality");
    e.quality = {static_cast<int>(r[0]), static_cast<int>(r[1])};
  }
  opt(j, "subsample_420", e.subsample_420);
  if (j.contains("sigma")) e.sigma = range2(j["sigma"], where + ".sigma");
  opt(j, "ksize", e.ksize);
  if (j.contains("brightness")) e.brightness = range2(j["brightness"], where + ".brightness");
  if (j.contains("contrast")) e.contrast = range2(j["contrast"], where + ".contrast");
  if (j.contains("saturation")) e.saturation = range2(j["saturation"], where + ".saturation");
  if (j.contains("hue")) e.hue = range2(j["hue"], where + ".hue");
  if (j.contains("presets")) e.presets = j["presets"].get<std::vector<std::string>>();
  if (j.contains("area")) e.area = range2(j["area"], where + ".area");
  if (j.contains("fills")) {
    e.fills.clear();
    for (const auto& f : j["fills"]) e.fills.push_back(fill_from_name(f.get<std::string>()));
  }
  return e;
}

nlohmann::json transform_range_to_json(const TransformRange& e) {
  nlohmann::json j;
  j["kind"] = transform_kind_name(e.kind);
  j["weight"] = e.weight;
  switch (e.kind) {
    case TransformKind::JpegApprox:
      j["quality"] = {e.quality[0], e.quality[1]};
      break;
    case TransformKind::JpegRoundtrip:
      j["quality"] = {e.quality[0], e.quality[1]};
      j["subsample_420"] = e.subsample_420;
      break;
    case TransformKind::GaussianBlur:
      j["sigma"] = {e.sigma[0], e.sigma[1]};
      j["ksize"] = e.ksize;
      break;
    case TransformKind::ColorContrast:
      j["brightness"] = {e.brightness[0], e.brightness[1]};
      j["contrast"] = {e.contrast[0], e.contrast[1]};
      j["saturation"] = {e.saturation[0], e.saturation[1]};
      j["hue"] = {e.hue[0], e.hue[1]};
      break;
    case TransformKind::FilterPreset:
      j["presets"] = e.presets;
      break;
    case TransformKind::LocalTamper: {
      j["area"] = {e.area[0], e.area[1]};
      std::vector<std::string> fills;
      for (auto f : e.fills) fills.push_back(fill_name(f));
      j["fills"] = fills;
      break;
    }
    case TransformKind::Identity:
      break;
  }
  return j;
}

std::vector<TransformRange> bank_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError("config: " + where + " must be an array");
  std::vector<TransformRange> out;
  int i = 0;
  for (const auto& e : j)
    out.push_back(transform_range_from_json(e, where + "[" + std::to_string(i++) + "]"));
  return out;
}

}  // namespace

void RunConfig::validate() const {
  if (schema_version != 1) throw ConfigError("config: unsupported schema_version");
  if (precision != "float32" && precision != "float64")
    throw ConfigError("config: precision must be float32 or float64");
  try {
    model.validate();
    benign.validate();
    if (!malicious.entries.empty()) malicious.validate();
    quant.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (train.mode != "robust" && train.mode != "semi_fragile")
    throw ConfigError("config: train.mode must be robust or semi_fragile");
  if (train.mode == "semi_fragile" && malicious.entries.empty())
    throw ConfigError("config: semi_fragile mode needs a malicious transform bank");
  if (train.iterations <= 0 || train.batch_size <= 0 || !(train.lr > 0))
    throw ConfigError("config: train.iterations, batch_size and lr must be positive");
  if (quant.tanh_lut_size < 2 || quant.tanh_lut_size % 2 != 0)
    throw ConfigError("config: quant.tanh_lut_size must be even and >= 2");
  if (!(quant.tanh_lut_range > 0)) throw ConfigError("config: quant.tanh_lut_range must be > 0");
  if (quant.mac_chunk < 1) throw ConfigError("config: quant.mac_chunk must be >= 1");
}

RunConfig default_run_config() {
  RunConfig c;
  {
    TransformRange e;
    e.kind = TransformKind::Identity;
    c.benign.entries.push_back(e);
    e.kind = TransformKind::JpegApprox;
    e.quality = {50, 95};
    c.benign.entries.push_back(e);
    e = TransformRange{};
    e.kind = TransformKind::GaussianBlur;
    e.sigma = {0.3, 1.0};
    e.ksize = 5;
    c.benign.entries.push_back(e);
    e = TransformRange{};
    e.kind = TransformKind::ColorContrast;
    c.benign.entries.push_back(e);
  }
  {
    TransformRange e;
    e.kind = TransformKind::LocalTamper;
    e.area = {0.05, 0.25};
    c.malicious.entries.push_back(e);
  }
  {
    TransformRange e;
    e.kind = TransformKind::Identity;
    c.eval_bank.push_back(e);
    e = TransformRange{};
    e.kind = TransformKind::JpegRoundtrip;
    e.quality = {75, 75};
    c.eval_bank.push_back(e);
    e = TransformRange{};
    e.kind = TransformKind::FilterPreset;
    c.eval_bank.push_back(e);
  }
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"schema_version", "seed", "precision", "model", "train", "transforms",
                     "quant", "paths"},
                 "document root");
  RunConfig c = default_run_config();
  opt(j, "schema_version", c.schema_version);
  opt(j, "seed", c.seed);
  opt(j, "precision", c.precision);

  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, {"height", "width", "message_bits", "secret_h", "secret_w", "enc_channels",
                       "enc_strides", "enc_up_channels", "dec_channels", "dec_strides",
                       "dec_up_channels", "kernel", "bn_eps", "bn_momentum"},
                   "model");
    opt(m, "height", c.model.height);
    opt(m, "width", c.model.width);
    opt(m, "message_bits", c.model.message_bits);
    opt(m, "secret_h", c.model.secret_h);
    opt(m, "secret_w", c.model.secret_w);
    opt(m, "enc_channels", c.model.enc_channels);
    opt(m, "enc_strides", c.model.enc_strides);
    opt(m, "enc_up_channels", c.model.enc_up_channels);
    opt(m, "dec_channels", c.model.dec_channels);
    opt(m, "dec_strides", c.model.dec_strides);
    opt(m, "dec_up_channels", c.model.dec_up_channels);
    opt(m, "kernel", c.model.kernel);
    opt(m, "bn_eps", c.model.bn_eps);
    opt(m, "bn_momentum", c.model.bn_momentum);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, {"mode", "batch_size", "iterations", "lr", "adam_beta1", "adam_beta2",
                       "adam_eps", "eval_every", "log_every", "workers", "loss"},
                   "train");
    opt(t, "mode", c.train.mode);
    opt(t, "batch_size", c.train.batch_size);
    opt(t, "iterations", c.train.iterations);
    opt(t, "lr", c.train.lr);
    opt(t, "adam_beta1", c.train.adam_beta1);
    opt(t, "adam_beta2", c.train.adam_beta2);
    opt(t, "adam_eps", c.train.adam_eps);
    opt(t, "eval_every", c.train.eval_every);
    opt(t, "log_every", c.train.log_every);
    opt(t, "workers", c.train.workers);
    if (t.contains("loss")) {
      const auto& l = t["loss"];
      reject_unknown(l, {"c_p", "c_m", "image_weight_start", "image_weight_end",
                         "image_weight_ramp_iters", "malicious_clamp"},
                     "train.loss");
      opt(l, "c_p", c.train.loss.c_p);
      opt(l, "c_m", c.train.loss.c_m);
      opt(l, "image_weight_start", c.train.loss.image_weight_start);
      opt(l, "image_weight_end", c.train.loss.image_weight_end);
      opt(l, "image_weight_ramp_iters", c.train.loss.image_ramp_iters);
      opt(l, "malicious_clamp", c.train.loss.malicious_clamp);
    }
  }
  if (j.contains("transforms")) {
    const auto& t = j["transforms"];
    reject_unknown(t, {"benign", "malicious", "eval"}, "transforms");
    if (t.contains("benign")) c.benign.entries = bank_from_json(t["benign"], "transforms.benign");
    if (t.contains("malicious"))
      c.malicious.entries = bank_from_json(t["malicious"], "transforms.malicious");
    if (t.contains("eval")) c.eval_bank = bank_from_json(t["eval"], "transforms.eval");
  }
  if (j.contains("quant")) {
    const auto& q = j["quant"];
    reject_unknown(q, {"spec", "tanh_lut_size", "tanh_lut_range", "mac_chunk"}, "quant");
    if (q.contains("spec")) {
      try {
        c.quant.spec = fixed::FixedSpec::parse(q["spec"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
    opt(q, "tanh_lut_size", c.quant.tanh_lut_size);
    opt(q, "tanh_lut_range", c.quant.tanh_lut_range);
    opt(q, "mac_chunk", c.quant.mac_chunk);
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    reject_unknown(p, {"dataset_dir", "val_dir", "out_dir"}, "paths");
    opt(p, "dataset_dir", c.paths.dataset_dir);
    opt(p, "val_dir", c.paths.val_dir);
    opt(p, "out_dir", c.paths.out_dir);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: " + path + " is not valid JSON");
  return run_config_from_json(j);
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["model"] = {{"height", c.model.height},
                {"width", c.model.width},
                {"message_bits", c.model.message_bits},
                {"secret_h", c.model.secret_h},
                {"secret_w", c.model.secret_w},
                {"enc_channels", c.model.enc_channels},
                {"enc_strides", c.model.enc_strides},
                {"enc_up_channels", c.model.enc_up_channels},
                {"dec_channels", c.model.dec_channels},
                {"dec_strides", c.model.dec_strides},
                {"dec_up_channels", c.model.dec_up_channels},
                {"kernel", c.model.kernel},
                {"bn_eps", c.model.bn_eps},
                {"bn_momentum", c.model.bn_momentum}};
  j["train"] = {{"mode", c.train.mode},
                {"batch_size", c.train.batch_size},
                {"iterations", c.train.iterations},
                {"lr", c.train.lr},
                {"adam_beta1", c.train.adam_beta1},
                {"adam_beta2", c.train.adam_beta2},
                {"adam_eps", c.train.adam_eps},
                {"eval_every", c.train.eval_every},
                {"log_every", c.train.log_every},
                {"workers", c.train.workers},
                {"loss",
                 {{"c_p", c.train.loss.c_p},
                  {"c_m", c.train.loss.c_m},
                  {"image_weight_start", c.train.loss.image_weight_start},
                  {"image_weight_end", c.train.loss.image_weight_end},
                  {"image_weight_ramp_iters", c.train.loss.image_ramp_iters},
                  {"malicious_clamp", c.train.loss.malicious_clamp}}}};
  nlohmann::json benign = nlohmann::json::array();
  for (const auto& e : c.benign.entries) benign.push_back(transform_range_to_json(e));
  nlohmann::json malicious = nlohmann::json::array();
  for (const auto& e : c.malicious.entries) malicious.push_back(transform_range_to_json(e));
  nlohmann::json eval = nlohmann::json::array();
  for (const auto& e : c.eval_bank) eval.push_back(transform_range_to_json(e));
  j["transforms"] = {{"benign", benign}, {"malicious", malicious}, {"eval", eval}};
  j["quant"] = {{"spec", c.quant.spec.name()},
                {"tanh_lut_size", c.quant.tanh_lut_size},
                {"tanh_lut_range", c.quant.tanh_lut_range},
                {"mac_chunk", c.quant.mac_chunk}};
  j["paths"] = {{"dataset_dir", c.paths.dataset_dir},
                {"val_dir", c.paths.val_dir},
                {"out_dir", c.paths.out_dir}};
  return j;
}

}  // namespace faststamp
