#pragma once

#include "faststamp/checkpoint.hpp"
#include "faststamp/fixed_model.hpp"

#include <cstring>

namespace faststamp {

/// Fixed checkpoints reuse the manifest+blob container with i32 tensor
/// records (raw Q-format words) and the Q-format recorded in the config block.
inline void save_quantized_checkpoint(const QuantizedEncoder& q, const std::string& path) {
  RawCheckpoint ck;
  ck.config = {{"model", model_config_to_json(q.config)},
               {"fixed_spec", q.spec.name()},
               {"tanh_lut_size", q.lut.size},
               {"tanh_lut_range", q.lut.range},
               {"mac_chunk", q.mac_chunk}};
  auto put = [&](const std::string& name, const fixed::FixedTensor& t) {
    RawTensorRecord r;
    r.name = name;
    r.shape = t.shape;
    r.dtype = "i32";
    r.learnable = false;
    r.bytes.resize(t.raw.size() * 4);
    std::memcpy(r.bytes.data(), t.raw.data(), r.bytes.size());
    ck.tensors.push_back(std::move(r));
  };
  put("enc.secret.w", q.secret_w);
  put("enc.secret.b", q.secret_b);
  auto put_layer = [&](const std::string& prefix, const QuantSepLayer& l) {
    put(prefix + ".dw", l.dw);
    put(prefix + ".pw.w", l.pw_w);
    put(prefix + ".pw.b", l.pw_b);
    if (l.has_bn) {
      put(prefix + ".bn.scale", l.bn_scale);
      put(prefix + ".bn.shift", l.bn_shift);
    }
  };
  for (std::size_t i = 0; i < q.down.size(); ++i)
    put_layer("enc.down" + std::to_string(i + 1), q.down[i]);
  for (std::size_t i = 0; i < q.up.size(); ++i)
    put_layer("enc.up" + std::to_string(i + 1), q.up[i]);
  put_layer("enc.out", q.out);
  save_raw_checkpoint(path, ck);
}

inline bool checkpoint_is_quantized(const std::string& path) {
  RawCheckpoint ck = load_raw_checkpoint(path);
  return ck.config.contains("fixed_spec");
}

inline QuantizedEncoder load_quantized_checkpoint(const std::string& path) {
  RawCheckpoint ck = load_raw_checkpoint(path);
  if (!ck.config.contains("fixed_spec"))
    throw CheckpointError(CheckpointErrorKind::BadManifest,
                          "checkpoint: not a quantized checkpoint (no fixed_spec)");
  QuantizedEncoder q;
  q.config = model_config_from_json(ck.config.at("model"));
  q.spec = fixed::FixedSpec::parse(ck.config.at("fixed_spec").get<std::string>());
  q.mac_chunk = ck.config.value("mac_chunk", 8);
  q.lut = fixed::build_tanh_lut(q.spec, ck.config.value("tanh_lut_range", 4.0),
                                ck.config.value("tanh_lut_size", 1024));

  std::map<std::string, fixed::FixedTensor> by_name;
  for (const auto& r : ck.tensors) {
    if (r.dtype != "i32")
      throw CheckpointError(CheckpointErrorKind::BadManifest,
                            "checkpoint: quantized record " + r.name + " must be i32");
    fixed::FixedTensor t(r.shape, q.spec);
    std::memcpy(t.raw.data(), r.bytes.data(), r.bytes.size());
    by_name.emplace(r.name, std::move(t));
  }
  auto take = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                            "checkpoint: missing tensor " + name);
    return std::move(it->second);
  };
  q.secret_w = take("enc.secret.w");
  q.secret_b = take("enc.secret.b");
  auto take_layer = [&](const std::string& prefix, int cin, int cout, int stride, bool bn) {
    QuantSepLayer l;
    l.dw = take(prefix + ".dw");
    l.pw_w = take(prefix + ".pw.w");
    l.pw_b = take(prefix + ".pw.b");
    l.has_bn = bn;
    l.relu_after = bn;
    l.stride = stride;
    l.cin = cin;
    l.cout = cout;
    if (bn) {
      l.bn_scale = take(prefix + ".bn.scale");
      l.bn_shift = take(prefix + ".bn.shift");
    }
    return l;
  };
  const auto& cfg = q.config;
  const int n = static_cast<int>(cfg.enc_channels.size());
  int cin = 4;
  std::vector<int> acts{cin};
  for (int i = 0; i < n; ++i) {
    q.down.push_back(take_layer("enc.down" + std::to_string(i + 1), cin,
                                cfg.enc_channels[static_cast<std::size_t>(i)],
                                cfg.enc_strides[static_cast<std::size_t>(i)], true));
    cin = cfg.enc_channels[static_cast<std::size_t>(i)];
    acts.push_back(cin);
  }
  for (int i = 0; i < n; ++i) {
    int skip = acts[static_cast<std::size_t>(n - 1 - i)];
    q.up.push_back(take_layer("enc.up" + std::to_string(i + 1), cin + skip,
                              cfg.enc_up_channels[static_cast<std::size_t>(i)], 1, true));
    cin = cfg.enc_up_channels[static_cast<std::size_t>(i)];
  }
  q.out = take_layer("enc.out", cin, 3, 1, false);
  return q;
}

}  // namespace faststamp
