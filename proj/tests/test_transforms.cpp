#include "faststamp/metrics.hpp"
#include "faststamp/transforms.hpp"

#include <doctest.h>

#include "testutil.hpp"

#include <cmath>
#include <cstring>
#include <map>

using namespace faststamp;
using testutil::gradient_check;
using testutil::random_tensor;
using testutil::synthetic_image;

TEST_CASE("identity-parameter transforms are exact identities") {
  auto x = synthetic_image<double>(1, 16, 16);

  TransformSpec id;
  auto y = apply_transform(id, x);
  CHECK(std::memcmp(y.array().data(), x.array().data(), sizeof(double) * x.size()) == 0);

  // blur with sigma -> 0 becomes a delta kernel
  auto yb = gaussian_blur(x, 0.0, 5);
  CHECK((yb.array() - x.array()).abs().maxCoeff() == 0.0);

  // neutral colour parameters
  auto yc = color_contrast(x, 0.0, 1.0, 1.0, 0.0);
  CHECK(std::memcmp(yc.array().data(), x.array().data(), sizeof(double) * x.size()) == 0);
}

TEST_CASE("blur of a constant image is the same constant") {
  auto x = Tensor<double>::full({3, 12, 12}, 0.42);
  for (double sigma : {0.5, 1.0, 2.5}) {
    auto y = gaussian_blur(x, sigma, 7);
    CHECK((y.array() - 0.42).abs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(gaussian_blur(x, 1.0, 4), std::invalid_argument);
}

TEST_CASE("differentiable transform gradients match finite differences") {
  Rng rng(31);
  SUBCASE("gaussian blur (replicate padding)") {
    auto x = random_tensor(rng, {3, 6, 6}, 0.2, 0.8);
    gradient_check({x}, [](const auto& in, GradTape<double>* t) {
      auto y = gaussian_blur(in[0], 1.1, 5, t);
      return mean(mul(y, y, t), t);
    }, 1e-5, 1e-3);
  }
  SUBCASE("colour/contrast/saturation/hue") {
    auto x = random_tensor(rng, {3, 5, 5}, 0.25, 0.75);
    gradient_check({x}, [](const auto& in, GradTape<double>* t) {
      auto y = color_contrast(in[0], 0.04, 1.1, 0.8, 0.2, t);
      return mean(mul(y, y, t), t);
    }, 1e-5, 1e-3);
  }
  SUBCASE("filter presets") {
    auto x = random_tensor(rng, {3, 5, 5}, 0.3, 0.7);
    for (const char* preset : {"warm", "high_contrast", "desaturate"}) {
      gradient_check({x}, [preset](const auto& in, GradTape<double>* t) {
        auto y = filter_preset(in[0], preset, t);
        return mean(mul(y, y, t), t);
      }, 1e-5, 1e-3);
    }
  }
  SUBCASE("jpeg stage adjoints (non-inverse composition)") {
    auto x = random_tensor(rng, {3, 8, 8}, 0.2, 0.8);
    MatrixRM<double> dct = jpeg::dct64_matrix();
    MatrixRM<double> factors(64, 3);
    Rng fr(5);
    for (int i = 0; i < 64; ++i)
      for (int c = 0; c < 3; ++c) factors(i, c) = fr.uniform(0.2, 2.0);
    gradient_check({x}, [&](const auto& in, GradTape<double>* t) {
      auto blocks = jpeg::to_blocks8(in[0], t);
      auto coeffs = jpeg::block_matrix_apply(blocks, dct, t);
      auto scaled = jpeg::scale_coeffs(coeffs, factors, 1, t);
      return mean(mul(scaled, scaled, t), t);
    }, 1e-5, 1e-3);
  }
  SUBCASE("full differentiable jpeg (smooth surrogate)") {
    auto x = random_tensor(rng, {3, 8, 8}, 0.25, 0.75);
    gradient_check({x}, [](const auto& in, GradTape<double>* t) {
      auto y = jpeg::jpeg_approx_diff(in[0], 60, t, /*hard_round=*/false);
      return mean(y, t);
    }, 1e-5, 1e-3);
  }
  SUBCASE("local tamper, blur and mean fills") {
    auto x = random_tensor(rng, {3, 8, 8}, 0.25, 0.75);
    TamperRect rect{2, 3, 4, 3};
    for (TamperFill fill : {TamperFill::Blur, TamperFill::MeanColor}) {
      gradient_check({x}, [rect, fill](const auto& in, GradTape<double>* t) {
        auto y = local_tamper(in[0], rect, fill, t);
        return mean(mul(y, y, t), t);
      }, 1e-5, 1e-3);
    }
  }
}

TEST_CASE("jpeg quality 100 on a constant image") {
  auto x = Tensor<double>::full({3, 16, 16}, 100.0 / 255.0);
  auto y = jpeg::jpeg_approx_diff<double>(x, 100);
  CHECK((y.array() - x.array()).abs().maxCoeff() < 1.0 / 255.0);

  auto z = jpeg::jpeg_roundtrip(x, 100);
  CHECK(std::memcmp(z.array().data(), x.array().data(), sizeof(double) * x.size()) == 0);
}

TEST_CASE("jpeg outputs stay in [0,1]") {
  for (std::uint64_t seed : {2ull, 3ull}) {
    auto x = synthetic_image<double>(seed, 16, 16);
    for (int q : {10, 50, 90}) {
      auto a = jpeg::jpeg_approx_diff(x, q);
      CHECK(a.array().minCoeff() >= 0.0);
      CHECK(a.array().maxCoeff() <= 1.0);
      auto b = jpeg::jpeg_roundtrip(x, q);
      CHECK(b.array().minCoeff() >= 0.0);
      CHECK(b.array().maxCoeff() <= 1.0);
    }
  }
}

TEST_CASE("decreasing jpeg quality never improves PSNR") {
  auto x = synthetic_image<double>(9, 32, 32);
  double prev = std::numeric_limits<double>::infinity();
  for (int q : {95, 85, 75, 60, 45, 30, 15, 5}) {
    auto y = jpeg::jpeg_roundtrip(x, q);
    double v = psnr(x, y);
    CHECK(v <= prev + 1e-9);
    prev = v;
  }
}

TEST_CASE("differentiable jpeg tracks the exact round-trip") {
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    auto x = synthetic_image<double>(seed, 24, 24);
    for (int q : {50, 75}) {
      auto a = jpeg::jpeg_approx_diff(x, q);
      auto b = jpeg::jpeg_roundtrip(x, q);
      double mad = (a.array() - b.array()).abs().mean();
      CHECK(mad < 0.02);
    }
  }
}

TEST_CASE("jpeg 4:2:0 subsampling option") {
  auto x = synthetic_image<double>(31, 32, 32);
  auto full = jpeg::jpeg_roundtrip(x, 75, false);
  auto sub = jpeg::jpeg_roundtrip(x, 75, true);
  CHECK(sub.array().minCoeff() >= 0.0);
  CHECK(sub.array().maxCoeff() <= 1.0);
  // chroma subsampling must actually change the result, but only mildly
  CHECK((sub.array() - full.array()).abs().maxCoeff() > 0.0);
  CHECK(psnr(x, sub) > 20.0);
  CHECK(psnr(x, sub) <= psnr(x, full) + 1e-9);
  // 4:2:0 needs dimensions divisible by 16
  CHECK_THROWS_AS(jpeg::jpeg_roundtrip(synthetic_image<double>(1, 24, 24), 75, true),
                  std::invalid_argument);
}

TEST_CASE("local tamper mask semantics") {
  auto x = synthetic_image<double>(21, 16, 16);

  // empty area is the identity
  Tensor<double> mask;
  auto y0 = local_tamper(x, TamperRect{}, TamperFill::MeanColor, nullptr, nullptr, &mask);
  CHECK(std::memcmp(y0.array().data(), x.array().data(), sizeof(double) * x.size()) == 0);
  CHECK(mask.array().maxCoeff() == 0.0);

  // full-area mean fill yields a constant image per channel
  auto y1 = local_tamper(x, TamperRect{0, 0, 16, 16}, TamperFill::MeanColor);
  for (int c = 0; c < 3; ++c) {
    auto seg = y1.array().segment(c * 256, 256);
    CHECK((seg - seg[0]).abs().maxCoeff() < 1e-12);
  }

  // pixels outside the rectangle are bit-identical
  TamperRect rect{4, 5, 6, 7};
  Tensor<double> m2;
  auto y2 = local_tamper(x, rect, TamperFill::Blur, nullptr, nullptr, &m2);
  long changed = 0;
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 16; ++yy)
      for (int xx = 0; xx < 16; ++xx) {
        bool inside = yy >= rect.y && yy < rect.y + rect.h && xx >= rect.x && xx < rect.x + rect.w;
        if (!inside) {
          CHECK(y2(c, yy, xx) == x(c, yy, xx));
        } else {
          changed += y2(c, yy, xx) != x(c, yy, xx);
        }
      }
  CHECK(changed > 0);
  CHECK(m2(0, rect.y, rect.x) == 1.0);
  CHECK(m2(0, 0, 0) == 0.0);

  // patch fill takes content from the source image
  auto other = synthetic_image<double>(99, 16, 16);
  auto y3 = local_tamper(x, rect, TamperFill::Patch, nullptr, &other);
  CHECK(y3(0, rect.y + 1, rect.x + 1) == other(0, rect.y + 1, rect.x + 1));
  CHECK(y3(0, 0, 0) == x(0, 0, 0));
}

TEST_CASE("sample_transform determinism and weights") {
  TransformDist dist;
  TransformRange a;
  a.kind = TransformKind::JpegApprox;
  a.weight = 1.0;
  TransformRange b;
  b.kind = TransformKind::GaussianBlur;
  b.weight = 2.0;
  TransformRange c;
  c.kind = TransformKind::ColorContrast;
  c.weight = 3.0;
  dist.entries = {a, b, c};

  // single-entry distribution always yields that transform
  TransformDist single;
  single.entries = {a};
  Rng r0(1);
  for (int i = 0; i < 20; ++i)
    CHECK(sample_transform(single, 64, 64, r0).kind == TransformKind::JpegApprox);

  // seeded sequences are reproducible
  Rng r1(42), r2(42);
  for (int i = 0; i < 50; ++i) {
    auto s1 = sample_transform(dist, 64, 64, r1);
    auto s2 = sample_transform(dist, 64, 64, r2);
    CHECK(s1.kind == s2.kind);
    CHECK(s1.quality == s2.quality);
    CHECK(s1.sigma == s2.sigma);
    CHECK(s1.brightness == s2.brightness);
  }

  // empirical frequencies match the weights within 3 sigma over 10k draws
  Rng r3(7);
  std::map<TransformKind, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) counts[sample_transform(dist, 64, 64, r3).kind]++;
  auto check_freq = [&](TransformKind k, double p) {
    double expect = n * p;
    double sigma = std::sqrt(n * p * (1 - p));
    CHECK(std::abs(counts[k] - expect) < 3 * sigma);
  };
  check_freq(TransformKind::JpegApprox, 1.0 / 6);
  check_freq(TransformKind::GaussianBlur, 2.0 / 6);
  check_freq(TransformKind::ColorContrast, 3.0 / 6);

  // invalid distributions are rejected
  TransformDist bad;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.entries = {a};
  bad.entries[0].quality = {0, 50};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.entries[0] = a;
  bad.entries[0].ksize = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.entries[0] = a;
  bad.entries[0].weight = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("transform outputs remain in unit range") {
  Rng rng(55);
  auto x = synthetic_image<double>(77, 16, 16);
  TransformDist dist;
  for (auto k : {TransformKind::JpegApprox, TransformKind::GaussianBlur,
                 TransformKind::ColorContrast, TransformKind::FilterPreset,
                 TransformKind::LocalTamper}) {
    TransformRange e;
    e.kind = k;
    dist.entries.push_back(e);
  }
  for (int i = 0; i < 40; ++i) {
    auto spec = sample_transform(dist, 16, 16, rng);
    auto y = apply_transform(spec, x);
    CHECK(y.array().minCoeff() >= 0.0);
    CHECK(y.array().maxCoeff() <= 1.0);
  }
}

TEST_CASE("unknown preset rejected") {
  auto x = synthetic_image<double>(4, 16, 16);
  CHECK_THROWS_AS(filter_preset(x, "sepia_deluxe"), std::invalid_argument);
}
