#include "faststamp/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

namespace faststamp {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'T', 'C', 'K', 'P', 'T', '0'};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint32_t blob_crc(const std::vector<std::uint8_t>& blob) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, blob.data(), static_cast<uInt>(blob.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void save_raw_checkpoint(const std::string& path, const RawCheckpoint& ck) {
  std::vector<std::uint8_t> blob;
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : ck.tensors) {
    std::int64_t count = shape_size(r.shape);
    std::size_t elem = 4;
    if (r.bytes.size() != static_cast<std::size_t>(count) * elem)
      throw CheckpointError(CheckpointErrorKind::BadManifest,
                            "checkpoint: tensor " + r.name + " byte size disagrees with shape");
    nlohmann::json rec;
    rec["name"] = r.name;
    rec["shape"] = r.shape;
    rec["dtype"] = r.dtype;
    rec["learnable"] = r.learnable;
    rec["offset"] = blob.size();
    rec["count"] = count;
    records.push_back(std::move(rec));
    blob.insert(blob.end(), r.bytes.begin(), r.bytes.end());
  }
  nlohmann::json manifest;
  manifest["schema_version"] = 1;
  manifest["config"] = ck.config;
  manifest["tensors"] = std::move(records);
  manifest["blob_size"] = blob.size();
  manifest["blob_crc32"] = blob_crc(blob);
  const std::string mtext = manifest.dump();

  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw CheckpointError(CheckpointErrorKind::Io, "checkpoint: cannot open " + path);
  std::uint32_t mlen = static_cast<std::uint32_t>(mtext.size());
  if (std::fwrite(kMagic, 1, 8, f.get()) != 8 ||
      std::fwrite(&mlen, 1, 4, f.get()) != 4 ||
      std::fwrite(mtext.data(), 1, mtext.size(), f.get()) != mtext.size() ||
      (blob.size() && std::fwrite(blob.data(), 1, blob.size(), f.get()) != blob.size()))
    throw CheckpointError(CheckpointErrorKind::Io, "checkpoint: short write to " + path);
}

RawCheckpoint load_raw_checkpoint(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw CheckpointError(CheckpointErrorKind::Io, "checkpoint: cannot open " + path);

  char magic[8];
  if (std::fread(magic, 1, 8, f.get()) != 8)
    throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint: file too short");
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError(CheckpointErrorKind::BadMagic, "checkpoint: bad magic bytes");

  std::uint32_t mlen = 0;
  if (std::fread(&mlen, 1, 4, f.get()) != 4)
    throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint: truncated header");
  std::string mtext(mlen, '\0');
  if (std::fread(mtext.data(), 1, mlen, f.get()) != mlen)
    throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint: truncated manifest");

  nlohmann::json manifest = nlohmann::json::parse(mtext, nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("tensors") ||
      !manifest.contains("blob_crc32") || !manifest.contains("blob_size"))
    throw CheckpointError(CheckpointErrorKind::BadManifest, "checkpoint: unparsable manifest");
  if (manifest.value("schema_version", 0) != 1)
    throw CheckpointError(CheckpointErrorKind::BadManifest,
                          "checkpoint: unsupported schema version");

  std::size_t blob_size = manifest["blob_size"].get<std::size_t>();
  std::vector<std::uint8_t> blob(blob_size);
  if (std::fread(blob.data(), 1, blob_size, f.get()) != blob_size)
    throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint: truncated blob");
  if (std::fgetc(f.get()) != EOF)
    throw CheckpointError(CheckpointErrorKind::BadManifest,
                          "checkpoint: trailing bytes after blob");
  if (blob_crc(blob) != manifest["blob_crc32"].get<std::uint32_t>())
    throw CheckpointError(CheckpointErrorKind::BadChecksum,
                          "checkpoint: blob CRC-32 mismatch (file corrupted?)");

  RawCheckpoint ck;
  ck.config = manifest.value("config", nlohmann::json::object());
  try {
    for (const auto& rec : manifest["tensors"]) {
      RawTensorRecord r;
      r.name = rec.at("name").get<std::string>();
      r.shape = rec.at("shape").get<Shape>();
      r.dtype = rec.at("dtype").get<std::string>();
      r.learnable = rec.value("learnable", true);
      std::size_t offset = rec.at("offset").get<std::size_t>();
      std::int64_t count = rec.at("count").get<std::int64_t>();
      if (count != shape_size(r.shape))
        throw CheckpointError(CheckpointErrorKind::BadManifest,
                              "checkpoint: record count disagrees with shape");
      std::size_t nbytes = static_cast<std::size_t>(count) * 4;
      if (offset + nbytes > blob.size())
        throw CheckpointError(CheckpointErrorKind::Truncated,
                              "checkpoint: record extends past blob end");
      r.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                     blob.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
      ck.tensors.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError(CheckpointErrorKind::BadManifest,
                          "checkpoint: malformed tensor record");
  }
  return ck;
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["message_bits"] = c.message_bits;
  j["secret_h"] = c.secret_h;
  j["secret_w"] = c.secret_w;
  j["enc_channels"] = c.enc_channels;
  j["enc_strides"] = c.enc_strides;
  j["enc_up_channels"] = c.enc_up_channels;
  j["dec_channels"] = c.dec_channels;
  j["dec_strides"] = c.dec_strides;
  j["dec_up_channels"] = c.dec_up_channels;
  j["kernel"] = c.kernel;
  j["bn_eps"] = c.bn_eps;
  j["bn_momentum"] = c.bn_momentum;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.message_bits = j.at("message_bits").get<int>();
    c.secret_h = j.at("secret_h").get<int>();
    c.secret_w = j.at("secret_w").get<int>();
    c.enc_channels = j.at("enc_channels").get<std::vector<int>>();
    c.enc_strides = j.at("enc_strides").get<std::vector<int>>();
    c.enc_up_channels = j.at("enc_up_channels").get<std::vector<int>>();
    c.dec_channels = j.at("dec_channels").get<std::vector<int>>();
    c.dec_strides = j.at("dec_strides").get<std::vector<int>>();
    c.dec_up_channels = j.at("dec_up_channels").get<std::vector<int>>();
    c.kernel = j.at("kernel").get<int>();
    c.bn_eps = j.at("bn_eps").get<double>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::BadManifest,
                          std::string("checkpoint: bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace faststamp
