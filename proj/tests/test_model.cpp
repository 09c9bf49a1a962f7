#include "faststamp/checkpoint.hpp"
#include "faststamp/model.hpp"

#include <doctest.h>

#include "testutil.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace faststamp;
using testutil::synthetic_image;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.height = c.width = 8;
  c.message_bits = 4;
  c.secret_h = c.secret_w = 2;
  c.enc_channels = {4, 8};
  c.enc_strides = {2, 2};
  c.enc_up_channels = {4, 4};
  c.dec_channels = {4, 8};
  c.dec_strides = {2, 1};
  c.dec_up_channels = {4, 4};
  return c;
}

ModelConfig small_config() {
  ModelConfig c;
  c.height = c.width = 16;
  c.message_bits = 8;
  c.secret_h = c.secret_w = 4;
  c.enc_channels = {4, 8};
  c.enc_strides = {2, 2};
  c.enc_up_channels = {4, 4};
  c.dec_channels = {4, 8};
  c.dec_strides = {2, 2};
  c.dec_up_channels = {4, 4};
  return c;
}

std::filesystem::path temp_file(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "faststamp_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("bit message hex mapping") {
  BitMessage m = BitMessage::from_hex("8f", 8);
  std::vector<std::uint8_t> expect = {1, 0, 0, 0, 1, 1, 1, 1};
  CHECK(m.bits == expect);
  CHECK(m.to_hex() == "8f");

  // length not a multiple of 4: low bits of the last digit must be zero
  BitMessage m6 = BitMessage::from_hex("84", 6);
  CHECK(m6.bits == std::vector<std::uint8_t>{1, 0, 0, 0, 0, 1});
  CHECK_THROWS_AS(BitMessage::from_hex("83", 6), std::invalid_argument);
  CHECK_THROWS_AS(BitMessage::from_hex("8", 8), std::invalid_argument);
  CHECK_THROWS_AS(BitMessage::from_hex("8z", 8), std::invalid_argument);
  CHECK_THROWS_AS(BitMessage({0, 1, 2}), std::invalid_argument);

  Rng rng(5);
  BitMessage r = BitMessage::random(128, rng);
  CHECK(r.length() == 128);
  CHECK(BitMessage::from_hex(r.to_hex(), 128).bits == r.bits);
}

TEST_CASE("init_params is deterministic and correctly sized") {
  ModelConfig cfg;  // default 128x128 / L=128
  auto a = init_params<float>(1234, cfg);
  auto b = init_params<float>(1234, cfg);
  REQUIRE(a.store.size() == b.store.size());
  for (std::size_t i = 0; i < a.store.size(); ++i) {
    const auto& ta = a.store.items()[i].tensor;
    const auto& tb = b.store.items()[i].tensor;
    CHECK(std::memcmp(ta.array().data(), tb.array().data(),
                      sizeof(float) * static_cast<std::size_t>(ta.size())) == 0);
  }
  auto c = init_params<float>(1235, cfg);
  CHECK(a.store.at("enc.secret.w").array()[0] != c.store.at("enc.secret.w").array()[0]);

  auto counts = param_count(a);
  // message upsampler linear: exactly L*h'*w' weights
  CHECK(a.store.at("enc.secret.w").size() == 32768);
  CHECK(counts.encoder_learnable >= 40000);
  CHECK(counts.encoder_learnable <= 55000);

  // all batch-norm variances initialized to 1
  for (const auto& it : a.store.items())
    if (it.name.ends_with(".bn.var")) {
      CHECK(it.tensor.array().minCoeff() == 1.0f);
      CHECK(it.tensor.array().maxCoeff() == 1.0f);
      CHECK_FALSE(it.learnable);
    }

  // per-tensor report covers every stored tensor
  CHECK(counts.per_tensor.size() == a.store.size());
}

TEST_CASE("secret_upsample structure") {
  ModelConfig cfg = small_config();
  auto p = init_params<double>(7, cfg);

  // zero message with zero bias gives an all-zero plane
  p.store.at("enc.secret.b").array_mut().setZero();
  BitMessage zero(std::vector<std::uint8_t>(8, 0));
  auto plane = secret_upsample(zero, p);
  CHECK(plane.shape() == Shape{1, 16, 16});
  CHECK(plane.array().abs().maxCoeff() == 0.0);

  // piecewise-constant on (h/h')x(w/w') blocks, equal to the brute-force
  // full-resolution projection with duplicated rows
  Rng rng(8);
  BitMessage msg = BitMessage::random(8, rng);
  auto out = secret_upsample(msg, p);
  const int f = cfg.height / cfg.secret_h;
  const auto& w = p.store.at("enc.secret.w");
  const auto& b = p.store.at("enc.secret.b");
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      int gy = y / f, gx = x / f;
      double acc = b(gy * cfg.secret_w + gx);
      for (int j = 0; j < cfg.message_bits; ++j)
        acc += w((gy * cfg.secret_w + gx) * cfg.message_bits + j) * msg.bits[static_cast<std::size_t>(j)];
      CHECK(out(0, y, x) == doctest::Approx(acc).epsilon(1e-12));
    }

  BitMessage wrong(std::vector<std::uint8_t>(5, 0));
  CHECK_THROWS_AS(secret_upsample(wrong, p), std::invalid_argument);
}

TEST_CASE("encode: output shape, range, and purity") {
  ModelConfig cfg;  // default scale exercises the 128->4 stage ladder
  auto p = init_params<float>(99, cfg);
  auto x = synthetic_image<float>(3, 128, 128);
  Rng rng(9);
  BitMessage s = BitMessage::random(128, rng);

  auto xw = encode(x, s, p);
  CHECK(xw.shape() == Shape{3, 128, 128});
  CHECK(xw.array().minCoeff() >= 0.0f);
  CHECK(xw.array().maxCoeff() <= 1.0f);

  auto xw2 = encode(x, s, p);
  CHECK(std::memcmp(xw.array().data(), xw2.array().data(),
                    sizeof(float) * static_cast<std::size_t>(xw.size())) == 0);

  auto soft = decode(xw, p);
  CHECK(soft.shape() == Shape{128});
  CHECK(soft.array().minCoeff() >= 0.0f);
  CHECK(soft.array().maxCoeff() <= 1.0f);

  // shape and range violations are rejected
  CHECK_THROWS_AS(encode(Tensor<float>::zeros({3, 64, 64}), s, p), std::invalid_argument);
  auto bad = x;
  bad.array_mut()[0] = 1.5f;
  CHECK_THROWS_AS(encode(bad, s, p), std::invalid_argument);
}

TEST_CASE("decode output length is config L regardless of content") {
  ModelConfig cfg = small_config();
  auto p = init_params<float>(11, cfg);
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    auto img = synthetic_image<float>(seed, 16, 16);
    CHECK(decode(img, p).size() == 8);
  }
}

TEST_CASE("untrained decoder sits at chance level") {
  ModelConfig cfg = small_config();
  auto p = init_params<float>(21, cfg);
  Rng rng(22);
  long match = 0, total = 0;
  for (int i = 0; i < 300; ++i) {
    auto img = synthetic_image<float>(1000 + static_cast<std::uint64_t>(i), 16, 16);
    auto soft = decode(img, p);
    BitMessage guess = hard_bits(soft);
    BitMessage truth = BitMessage::random(8, rng);
    for (int j = 0; j < 8; ++j) {
      match += guess.bits[static_cast<std::size_t>(j)] == truth.bits[static_cast<std::size_t>(j)];
      ++total;
    }
  }
  double bra = 100.0 * static_cast<double>(match) / static_cast<double>(total);
  CHECK(total >= 2000);
  CHECK(bra > 45.0);
  CHECK(bra < 55.0);
}

TEST_CASE("checkpoint round-trip is byte-identical") {
  auto p = init_params<float>(31, micro_config());
  auto path1 = temp_file("ck1.fstp");
  auto path2 = temp_file("ck2.fstp");
  save_checkpoint(p, path1.string());
  auto q = load_checkpoint<float>(path1.string());
  save_checkpoint(q, path2.string());

  std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  CHECK(b1.size() > 0);

  REQUIRE(q.store.size() == p.store.size());
  for (std::size_t i = 0; i < p.store.size(); ++i) {
    CHECK(q.store.items()[i].name == p.store.items()[i].name);
    CHECK(q.store.items()[i].learnable == p.store.items()[i].learnable);
  }
}

TEST_CASE("checkpoint integrity and mismatch errors") {
  auto p = init_params<float>(41, micro_config());
  auto path = temp_file("ck_corrupt.fstp");
  save_checkpoint(p, path.string());

  // flip one blob byte -> checksum error
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(0, std::ios::end);
    auto end = f.tellg();
    f.seekp(static_cast<std::streamoff>(end) - 5);
    char c;
    f.seekg(static_cast<std::streamoff>(end) - 5);
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x40);
    f.seekp(static_cast<std::streamoff>(end) - 5);
    f.write(&c, 1);
  }
  try {
    load_checkpoint<float>(path.string());
    FAIL("expected checksum error");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointErrorKind::BadChecksum);
  }

  // truncated file
  save_checkpoint(p, path.string());
  {
    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 64);
  }
  try {
    load_checkpoint<float>(path.string());
    FAIL("expected truncation error");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointErrorKind::Truncated);
  }

  // bad magic
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOTACKPT";
  }
  try {
    load_checkpoint<float>(path.string());
    FAIL("expected magic error");
  } catch (const CheckpointError& e) {
    CHECK((e.kind == CheckpointErrorKind::BadMagic || e.kind == CheckpointErrorKind::Truncated));
  }

  // loading a checkpoint with a different message length is a shape mismatch
  ModelConfig other = micro_config();
  other.message_bits = 8;
  auto p2 = init_params<float>(42, other);
  save_checkpoint(p2, path.string());
  try {
    load_checkpoint_matching<float>(path.string(), micro_config());
    FAIL("expected shape mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointErrorKind::ShapeMismatch);
  }
}

TEST_CASE("config validation rejects bad schedules") {
  ModelConfig c = micro_config();
  c.enc_channels = {4, 6};  // not doubling
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = micro_config();
  c.secret_h = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = micro_config();
  c.enc_strides = {2, 3};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = micro_config();
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("running stats update uses momentum in layer order") {
  auto p = init_params<double>(55, micro_config());
  BnStatsSink<double> sink;
  auto x = synthetic_image<double>(17, 8, 8);
  Rng rng(18);
  BitMessage s = BitMessage::random(4, rng);
  encode(x, s, p, nullptr, BnMode::Train, &sink);
  CHECK(sink.size() == p.config.enc_channels.size() * 2);  // down + up blocks

  auto before = p.store.at("enc.down1.bn.mean").array().eval();
  update_running_stats(p, sink);
  auto after = p.store.at("enc.down1.bn.mean").array().eval();
  const auto& st = sink[0].second;
  for (Eigen::Index i = 0; i < after.size(); ++i)
    CHECK(after[i] == doctest::Approx(0.9 * before[i] + 0.1 * st.mean[i]));
}
