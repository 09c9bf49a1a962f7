#pragma once

#include "faststamp/model.hpp"

#include <json.hpp>

#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace faststamp {

enum class CheckpointErrorKind { Io, BadMagic, BadManifest, BadChecksum, Truncated, ShapeMismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
  CheckpointErrorKind kind;
};

struct RawTensorRecord {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" or "i32"
  bool learnable = true;
  std::vector<std::uint8_t> bytes;
};

/// Container contents: a JSON manifest (schema version, config block, ordered
/// tensor records with offsets/counts, CRC-32 of the blob) plus a little-endian
/// binary blob holding the tensor data in manifest order.
struct RawCheckpoint {
  nlohmann::json config;
  std::vector<RawTensorRecord> tensors;
};

void save_raw_checkpoint(const std::string& path, const RawCheckpoint& ck);
RawCheckpoint load_raw_checkpoint(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const ModelParams<S>& p, const std::string& path) {
  RawCheckpoint ck;
  ck.config = model_config_to_json(p.config);
  for (const auto& it : p.store.items()) {
    RawTensorRecord r;
    r.name = it.name;
    r.shape = it.tensor.shape();
    r.dtype = "f32";
    r.learnable = it.learnable;
    r.bytes.resize(static_cast<std::size_t>(it.tensor.size()) * 4);
    for (std::int64_t i = 0; i < it.tensor.size(); ++i) {
      float v = static_cast<float>(it.tensor.value(i));
      std::memcpy(r.bytes.data() + i * 4, &v, 4);
    }
    ck.tensors.push_back(std::move(r));
  }
  save_raw_checkpoint(path, ck);
}

template <typename S>
ModelParams<S> load_checkpoint(const std::string& path) {
  RawCheckpoint ck = load_raw_checkpoint(path);
  ModelParams<S> p;
  p.config = model_config_from_json(ck.config);
  for (const auto& r : ck.tensors) {
    if (r.dtype != "f32")
      throw CheckpointError(CheckpointErrorKind::BadManifest,
                            "checkpoint: tensor " + r.name + " has dtype " + r.dtype +
                                ", expected f32");
    Tensor<S> t(r.shape);
    auto& a = t.array_mut();
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      float v;
      std::memcpy(&v, r.bytes.data() + static_cast<std::size_t>(i) * 4, 4);
      a[i] = static_cast<S>(v);
    }
    p.store.add(r.name, std::move(t), r.learnable);
  }
  return p;
}

/// Loads and verifies the checkpoint was produced for `expect`; a different
/// architecture (e.g. another message length) is a shape-mismatch error.
template <typename S>
ModelParams<S> load_checkpoint_matching(const std::string& path, const ModelConfig& expect) {
  ModelParams<S> p = load_checkpoint<S>(path);
  if (!(p.config == expect))
    throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                          "checkpoint: stored model configuration does not match the "
                          "requested one");
  return p;
}

}  // namespace faststamp
