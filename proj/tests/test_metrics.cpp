#include "faststamp/metrics.hpp"

#include <doctest.h>

#include "testutil.hpp"

#include <cmath>

using namespace faststamp;
using testutil::synthetic_image;

namespace {

/// Independent SSIM oracle: separable Gaussian filtering of the moment maps
/// over the valid region (the textbook formulation), rather than per-window
/// accumulation.
double ssim_oracle(const Tensor<double>& x, const Tensor<double>& y) {
  const int H = x.dim(1), W = x.dim(2);
  const int win = 11;
  const double sigma = 1.5;
  std::vector<double> g(win);
  double s = 0;
  for (int i = 0; i < win; ++i) {
    double d = i - (win - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
    s += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= s;

  auto lum = [&](const Tensor<double>& t) {
    std::vector<double> out(static_cast<std::size_t>(H) * W);
    for (int i = 0; i < H * W; ++i)
      out[static_cast<std::size_t>(i)] = 0.299 * t.array()[i] + 0.587 * t.array()[H * W + i] +
                                         0.114 * t.array()[2 * H * W + i];
    return out;
  };
  auto filt = [&](const std::vector<double>& in) {
    // horizontal then vertical, valid region only
    const int Wv = W - win + 1, Hv = H - win + 1;
    std::vector<double> tmp(static_cast<std::size_t>(H) * Wv, 0.0);
    for (int yy = 0; yy < H; ++yy)
      for (int xx = 0; xx < Wv; ++xx) {
        double acc = 0;
        for (int k = 0; k < win; ++k)
          acc += g[static_cast<std::size_t>(k)] * in[static_cast<std::size_t>(yy) * W + xx + k];
        tmp[static_cast<std::size_t>(yy) * Wv + xx] = acc;
      }
    std::vector<double> out(static_cast<std::size_t>(Hv) * Wv, 0.0);
    for (int yy = 0; yy < Hv; ++yy)
      for (int xx = 0; xx < Wv; ++xx) {
        double acc = 0;
        for (int k = 0; k < win; ++k)
          acc += g[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>(yy + k) * Wv + xx];
        out[static_cast<std::size_t>(yy) * Wv + xx] = acc;
      }
    return out;
  };

  auto lx = lum(x), ly = lum(y);
  auto mul = [&](const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
  };
  auto mx = filt(lx), my = filt(ly);
  auto mxx = filt(mul(lx, lx)), myy = filt(mul(ly, ly)), mxy = filt(mul(lx, ly));
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    double vx = mxx[i] - mx[i] * mx[i];
    double vy = myy[i] - my[i] * my[i];
    double cxy = mxy[i] - mx[i] * my[i];
    acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.size());
}

}  // namespace

TEST_CASE("psnr examples") {
  auto x = synthetic_image<double>(1, 24, 24);
  CHECK(std::isinf(psnr(x, x)));
  CHECK(psnr_capped(psnr(x, x)) == kPsnrCap);

  // uniform error of 0.1 -> exactly 20 dB
  Tensor<double> a = Tensor<double>::full({3, 8, 8}, 0.4);
  Tensor<double> b = Tensor<double>::full({3, 8, 8}, 0.5);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(psnr(a, b) == psnr(b, a));

  CHECK_THROWS_AS(psnr(a, Tensor<double>::zeros({3, 8, 9})), std::invalid_argument);

  // strictly decreasing with noise amplitude
  Rng rng(3);
  double prev = std::numeric_limits<double>::infinity();
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    Tensor<double> noisy = x;
    auto& arr = noisy.array_mut();
    Rng r2(17);
    for (Eigen::Index i = 0; i < arr.size(); ++i) arr[i] += amp * (r2.uniform() - 0.5);
    double v = psnr(x, noisy);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("ssim examples and oracle cross-check") {
  auto x = synthetic_image<double>(5, 32, 32);
  CHECK(ssim(x, x) == 1.0);

  // complemented high-contrast image scores badly
  Tensor<double> inv(x.shape(), (1.0 - x.array()).eval());
  double v = ssim(x, inv);
  CHECK(v < 0.5);
  CHECK(v == doctest::Approx(ssim(inv, x)).epsilon(1e-12));
  CHECK(v == doctest::Approx(ssim_oracle(x, inv)).epsilon(1e-9));

  // against a noisy copy too
  Tensor<double> noisy = x;
  Rng rng(6);
  for (Eigen::Index i = 0; i < noisy.array_mut().size(); ++i)
    noisy.array_mut()[i] = std::min(1.0, std::max(0.0, noisy.array()[i] + 0.05 * (rng.uniform() - 0.5)));
  CHECK(ssim(x, noisy) == doctest::Approx(ssim_oracle(x, noisy)).epsilon(1e-9));

  CHECK_THROWS_AS(ssim(Tensor<double>::zeros({3, 8, 8}), Tensor<double>::zeros({3, 8, 8})),
                  std::invalid_argument);
}

TEST_CASE("bra examples") {
  BitMessage a({1, 0, 1, 1, 0, 0, 1, 0});
  CHECK(bra(a, a) == 100.0);
  BitMessage flip({0, 1, 0, 0, 1, 1, 0, 1});
  CHECK(bra(a, flip) == 0.0);

  // soft bits are thresholded at 0.5
  auto soft = Tensor<double>::from_values({8}, {0.9, 0.2, 0.6, 0.51, 0.49, 0.1, 0.7, 0.4});
  CHECK(bra(a, soft) == 100.0);

  // permutation applied to both strings leaves BRA unchanged
  BitMessage b({1, 1, 0, 0, 1, 0, 0, 1});
  double base = bra(a, b);
  std::vector<std::size_t> perm = {3, 1, 7, 0, 5, 2, 6, 4};
  BitMessage ap, bp;
  for (auto i : perm) {
    ap.bits.push_back(a.bits[i]);
    bp.bits.push_back(b.bits[i]);
  }
  CHECK(bra(ap, bp) == base);

  // random independent guesses hover at 50%
  Rng rng(7);
  long match = 0, total = 0;
  for (int t = 0; t < 40; ++t) {
    BitMessage g1 = BitMessage::random(128, rng);
    BitMessage g2 = BitMessage::random(128, rng);
    for (int i = 0; i < 128; ++i) match += g1.bits[static_cast<std::size_t>(i)] == g2.bits[static_cast<std::size_t>(i)];
    total += 128;
  }
  double pct = 100.0 * static_cast<double>(match) / static_cast<double>(total);
  CHECK(pct > 45.0);
  CHECK(pct < 55.0);

  CHECK_THROWS_AS(bra(a, BitMessage({1, 0})), std::invalid_argument);
}

TEST_CASE("bpp formula values") {
  CHECK(bpp(30, 128, 128, 3) == 30.0 / (128.0 * 128.0 * 3.0));
  CHECK(bpp(30, 128, 128, 3) == doctest::Approx(6.1e-4).epsilon(0.01));
  CHECK(bpp(256, 128, 128, 3) == 256.0 / 49152.0);
  CHECK(bpp(256, 128, 128, 3) == doctest::Approx(5.2e-3).epsilon(0.01));
  // the engine reports the formula value (2.60e-3), not the rounded table entry
  CHECK(bpp(128, 128, 128, 3) == 128.0 / 49152.0);
  CHECK(bpp(128, 128, 128, 3) == doctest::Approx(2.604e-3).epsilon(0.001));
  CHECK_THROWS_AS(bpp(128, 0, 128, 3), std::invalid_argument);
}

TEST_CASE("mac_count profiles") {
  ModelConfig cfg;  // default
  auto prof = mac_count(cfg);
  CHECK(prof.total > 0);

  // separable always beats the equivalent full convolution here
  for (const auto& e : prof.layers)
    if (e.layer.find("down") != std::string::npos || e.layer.find("up") != std::string::npos) {
      CHECK(e.total() < e.full_equiv);
    }

  // first encoder block: 4ch depthwise 3x3 + 4->8 pointwise at 64x64
  const auto& d1 = prof.layers[1];
  CHECK(d1.layer == "enc.down1");
  CHECK(d1.depthwise == 4LL * 9 * 64 * 64);
  CHECK(d1.pointwise == 8LL * 4 * 64 * 64);

  // message upsampler and inverse head
  CHECK(prof.layers.front().layer == "enc.secret");
  CHECK(prof.layers.front().total() == 128LL * 256);
  CHECK(prof.layers.back().layer == "dec.msg");
  CHECK(prof.layers.back().total() == 256LL * 128);

  // degenerate 1x1 image with kernel 1: counts reduce to channel products
  ModelConfig tiny;
  tiny.height = tiny.width = 1;
  tiny.secret_h = tiny.secret_w = 1;
  tiny.message_bits = 4;
  tiny.kernel = 1;
  tiny.enc_channels = {4};
  tiny.enc_strides = {1};
  tiny.enc_up_channels = {4};
  tiny.dec_channels = {4};
  tiny.dec_strides = {1};
  tiny.dec_up_channels = {4};
  auto tp = mac_count(tiny);
  const auto& td1 = tp.layers[1];
  CHECK(td1.depthwise == 4);
  CHECK(td1.pointwise == 16);
}

TEST_CASE("metrics report serializes losslessly") {
  MetricsReport r;
  r.psnr_db = std::numeric_limits<double>::infinity();
  r.ssim_val = 0.987;
  r.bra_pct = 99.5;
  r.bpp_val = bpp(128, 128, 128, 3);
  auto j = r.to_json();
  CHECK(j["psnr"] == kPsnrCap);
  auto r2 = MetricsReport::from_json(nlohmann::json::parse(j.dump()));
  CHECK(r2.ssim_val == r.ssim_val);
  CHECK(r2.bra_pct == r.bra_pct);
  CHECK(r2.bpp_val == r.bpp_val);
}
