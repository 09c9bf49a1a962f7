#pragma once

#include "faststamp/model.hpp"
#include "faststamp/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace faststamp {

/// PSNR sentinel used in tabular output for identical images.
inline constexpr double kPsnrCap = 99.0;

/// 10*log10(peak^2 / MSE); +inf for identical images.
template <typename S>
double psnr(const Tensor<S>& x, const Tensor<S>& y, double peak = 1.0) {
  require_same_shape(x, y, "psnr");
  double mse = (x.array().template cast<double>() - y.array().template cast<double>())
                   .square()
                   .mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr_capped(double v) { return std::isfinite(v) ? std::min(v, kPsnrCap) : kPsnrCap; }

namespace detail {

/// Rec.601 luma of an RGB (3,H,W) tensor, as doubles.
template <typename S>
ArrayX<double> luminance(const Tensor<S>& x) {
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  ArrayX<double> y(hw);
  auto r = x.array().segment(0, hw).template cast<double>();
  auto g = x.array().segment(hw, hw).template cast<double>();
  auto b = x.array().segment(2 * hw, hw).template cast<double>();
  y = 0.299 * r + 0.587 * g + 0.114 * b;
  return y;
}

}  // namespace detail

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1=0.01, K2=0.03,
/// dynamic range 1.0) of the luminance images.
template <typename S>
double ssim(const Tensor<S>& x, const Tensor<S>& y) {
  require_same_shape(x, y, "ssim");
  if (x.rank() != 3 || x.dim(0) != 3)
    throw std::invalid_argument("ssim: expects RGB images (3,H,W)");
  const int H = x.dim(1), W = x.dim(2);
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  if (H < kWin || W < kWin)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");

  ArrayX<double> lx = detail::luminance(x);
  ArrayX<double> ly = detail::luminance(y);

  double wsum = 0.0;
  double win[kWin][kWin];
  for (int u = 0; u < kWin; ++u)
    for (int v = 0; v < kWin; ++v) {
      double du = u - (kWin - 1) / 2.0, dv = v - (kWin - 1) / 2.0;
      win[u][v] = std::exp(-(du * du + dv * dv) / (2 * kSigma * kSigma));
      wsum += win[u][v];
    }
  for (auto& row : win)
    for (auto& w : row) w /= wsum;

  constexpr double c1 = 0.01 * 0.01;  // (K1*L)^2, L=1
  constexpr double c2 = 0.03 * 0.03;
  double acc = 0.0;
  long count = 0;
  for (int oy = 0; oy + kWin <= H; ++oy)
    for (int ox = 0; ox + kWin <= W; ++ox) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int u = 0; u < kWin; ++u)
        for (int v = 0; v < kWin; ++v) {
          double w = win[u][v];
          double a = lx[(oy + u) * static_cast<std::int64_t>(W) + ox + v];
          double b = ly[(oy + u) * static_cast<std::int64_t>(W) + ox + v];
          mx += w * a;
          my += w * b;
          sxx += w * a * a;
          syy += w * b * b;
          sxy += w * a * b;
        }
      sxx -= mx * mx;
      syy -= my * my;
      sxy -= mx * my;
      acc += ((2 * mx * my + c1) * (2 * sxy + c2)) /
             ((mx * mx + my * my + c1) * (sxx + syy + c2));
      ++count;
    }
  return acc / static_cast<double>(count);
}

/// Bit-recovery accuracy in percent.
inline double bra(const BitMessage& s, const BitMessage& s_hat) {
  if (s.length() != s_hat.length())
    throw std::invalid_argument("bra: bit string length mismatch");
  long match = 0;
  for (std::size_t i = 0; i < s.length(); ++i) match += s.bits[i] == s_hat.bits[i];
  return 100.0 * static_cast<double>(match) / static_cast<double>(s.length());
}

/// Thresholds soft bits at 0.5 before comparing.
template <typename S>
double bra(const BitMessage& s, const Tensor<S>& soft) {
  if (static_cast<std::int64_t>(s.length()) != soft.size())
    throw std::invalid_argument("bra: bit string length mismatch");
  return bra(s, hard_bits(soft));
}

/// Capacity in bits per pixel: L/(H*W*C).
inline double bpp(int L, int H, int W, int C) {
  if (L <= 0 || H <= 0 || W <= 0 || C <= 0)
    throw std::invalid_argument("bpp: arguments must be positive");
  return static_cast<double>(L) /
         (static_cast<double>(H) * static_cast<double>(W) * static_cast<double>(C));
}

// ---------------------------------------------------------------------------
// Operation-count profile
// ---------------------------------------------------------------------------

struct MacEntry {
  std::string layer;
  std::int64_t depthwise = 0;
  std::int64_t pointwise = 0;
  std::int64_t total() const { return depthwise + pointwise; }
  /// MACs of the equivalent full (non-separable) convolution, for comparison.
  std::int64_t full_equiv = 0;
};

struct MacProfile {
  std::vector<MacEntry> layers;
  std::int64_t total = 0;
};

/// Analytic multiply-accumulate counts per layer of the configured model.
inline MacProfile mac_count(const ModelConfig& cfg) {
  MacProfile prof;
  const std::int64_t k2 = static_cast<std::int64_t>(cfg.kernel) * cfg.kernel;
  auto add_linear = [&](const std::string& name, std::int64_t in, std::int64_t out) {
    MacEntry e;
    e.layer = name;
    e.pointwise = in * out;
    e.full_equiv = e.pointwise;
    prof.layers.push_back(e);
  };
  auto add_sep = [&](const std::string& name, std::int64_t cin, std::int64_t cout,
                     std::int64_t oh, std::int64_t ow) {
    MacEntry e;
    e.layer = name;
    e.depthwise = cin * k2 * oh * ow;
    e.pointwise = cout * cin * oh * ow;
    e.full_equiv = cout * cin * k2 * oh * ow;
    prof.layers.push_back(e);
  };

  add_linear("enc.secret", cfg.message_bits,
             static_cast<std::int64_t>(cfg.secret_h) * cfg.secret_w);
  auto walk = [&](const std::string& net, int in_ch, const std::vector<int>& channels,
                  const std::vector<int>& strides, const std::vector<int>& up_channels,
                  int head_out) {
    int h = cfg.height, w = cfg.width;
    int cin = in_ch;
    std::vector<int> acts{cin};
    const int n = static_cast<int>(channels.size());
    for (int i = 0; i < n; ++i) {
      int s = strides[static_cast<std::size_t>(i)];
      h = (h + s - 1) / s;
      w = (w + s - 1) / s;
      add_sep(net + ".down" + std::to_string(i + 1), cin, channels[static_cast<std::size_t>(i)],
              h, w);
      cin = channels[static_cast<std::size_t>(i)];
      acts.push_back(cin);
    }
    for (int i = 0; i < n; ++i) {
      int mirrored = strides[static_cast<std::size_t>(n - 1 - i)];
      if (mirrored > 1) {
        h *= mirrored;
        w *= mirrored;
      }
      int cat = cin + acts[static_cast<std::size_t>(n - 1 - i)];
      add_sep(net + ".up" + std::to_string(i + 1), cat,
              up_channels[static_cast<std::size_t>(i)], h, w);
      cin = up_channels[static_cast<std::size_t>(i)];
    }
    add_sep(net + (net == "enc" ? ".out" : ".head"), cin, head_out, h, w);
  };
  walk("enc", 4, cfg.enc_channels, cfg.enc_strides, cfg.enc_up_channels, 3);
  walk("dec", 3, cfg.dec_channels, cfg.dec_strides, cfg.dec_up_channels, 1);
  add_linear("dec.msg", static_cast<std::int64_t>(cfg.secret_h) * cfg.secret_w,
             cfg.message_bits);

  for (const auto& e : prof.layers) prof.total += e.total();
  return prof;
}

// ---------------------------------------------------------------------------
// Report record
// ---------------------------------------------------------------------------

/// One evaluation record; serialized as a single JSON line in report files.
/// The MAC profile is attached to summary records when available.
struct MetricsReport {
  double psnr_db = 0;
  double ssim_val = 0;
  double bra_pct = 0;
  double bpp_val = 0;
  MacProfile macs;

  nlohmann::json to_json() const {
    nlohmann::json j{{"psnr", psnr_capped(psnr_db)},
                     {"ssim", ssim_val},
                     {"bra", bra_pct},
                     {"bpp", bpp_val}};
    if (!macs.layers.empty()) {
      nlohmann::json m = nlohmann::json::object();
      for (const auto& e : macs.layers) m[e.layer] = e.total();
      j["mac_total"] = macs.total;
      j["mac_per_layer"] = std::move(m);
    }
    return j;
  }
  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.psnr_db = j.at("psnr").get<double>();
    r.ssim_val = j.at("ssim").get<double>();
    r.bra_pct = j.at("bra").get<double>();
    r.bpp_val = j.at("bpp").get<double>();
    return r;
  }
};

}  // namespace faststamp
