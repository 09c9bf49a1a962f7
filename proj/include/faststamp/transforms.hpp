#pragma once

#include "faststamp/jpeg.hpp"
#include "faststamp/ops.hpp"
#include "faststamp/rng.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace faststamp {

enum class TransformKind {
  Identity,
  JpegApprox,
  JpegRoundtrip,
  GaussianBlur,
  ColorContrast,
  FilterPreset,
  LocalTamper,
};

enum class TamperFill { Patch, Blur, MeanColor };

inline std::string transform_kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::Identity: return "identity";
    case TransformKind::JpegApprox: return "jpeg_approx";
    case TransformKind::JpegRoundtrip: return "jpeg_roundtrip";
    case TransformKind::GaussianBlur: return "gaussian_blur";
    case TransformKind::ColorContrast: return "color_contrast";
    case TransformKind::FilterPreset: return "filter_preset";
    case TransformKind::LocalTamper: return "local_tamper";
  }
  return "?";
}

inline TransformKind transform_kind_from_name(const std::string& s) {
  for (auto k : {TransformKind::Identity, TransformKind::JpegApprox, TransformKind::JpegRoundtrip,
                 TransformKind::GaussianBlur, TransformKind::ColorContrast,
                 TransformKind::FilterPreset, TransformKind::LocalTamper})
    if (transform_kind_name(k) == s) return k;
  throw std::invalid_argument("unknown transform kind: " + s);
}

struct TamperRect {
  int y = 0, x = 0, h = 0, w = 0;
  bool empty() const { return h <= 0 || w <= 0; }
};

/// One concrete transform: all randomness already resolved.
struct TransformSpec {
  TransformKind kind = TransformKind::Identity;
  int quality = 75;
  bool subsample_420 = false;  // jpeg_roundtrip only (eval option)
  double sigma = 1.0;
  int ksize = 5;
  double brightness = 0.0, contrast = 1.0, saturation = 1.0, hue = 0.0;
  std::string preset;
  double area = 0.1;
  TamperFill fill = TamperFill::MeanColor;
  TamperRect rect;

  std::string name() const {
    switch (kind) {
      case TransformKind::JpegApprox: return "jpeg_approx_q" + std::to_string(quality);
      case TransformKind::JpegRoundtrip: return "jpeg_q" + std::to_string(quality);
      case TransformKind::FilterPreset: return "filter_" + preset;
      default: return transform_kind_name(kind);
    }
  }
};

/// One weighted entry of a transform distribution; parameters are sampled
/// uniformly from the stated ranges.
struct TransformRange {
  TransformKind kind = TransformKind::Identity;
  double weight = 1.0;
  std::array<int, 2> quality{50, 95};
  bool subsample_420 = false;
  std::array<double, 2> sigma{0.3, 1.2};
  int ksize = 5;
  std::array<double, 2> brightness{-0.08, 0.08};
  std::array<double, 2> contrast{0.85, 1.15};
  std::array<double, 2> saturation{0.7, 1.3};
  std::array<double, 2> hue{-0.15, 0.15};
  std::vector<std::string> presets{"warm", "high_contrast", "desaturate"};
  std::array<double, 2> area{0.05, 0.25};
  std::vector<TamperFill> fills{TamperFill::Patch, TamperFill::Blur, TamperFill::MeanColor};
};

struct TransformDist {
  std::vector<TransformRange> entries;

  void validate() const {
    if (entries.empty()) throw std::invalid_argument("transform distribution is empty");
    double total = 0;
    for (const auto& e : entries) {
      if (!(e.weight > 0)) throw std::invalid_argument("transform weights must be positive");
      total += e.weight;
      if (e.quality[0] < 1 || e.quality[1] > 100 || e.quality[0] > e.quality[1])
        throw std::invalid_argument("transform quality range must lie in [1,100]");
      if (e.ksize < 1 || e.ksize % 2 == 0)
        throw std::invalid_argument("blur kernel size must be odd");
      if (e.area[0] < 0 || e.area[1] > 1 || e.area[0] > e.area[1])
        throw std::invalid_argument("tamper area range must lie in [0,1]");
      if (e.kind == TransformKind::FilterPreset && e.presets.empty())
        throw std::invalid_argument("filter preset entry needs at least one preset name");
      if (e.kind == TransformKind::LocalTamper && e.fills.empty())
        throw std::invalid_argument("tamper entry needs at least one fill mode");
    }
    if (!(total > 0)) throw std::invalid_argument("transform weights sum to zero");
  }
};

// ---------------------------------------------------------------------------
// Differentiable transforms
// ---------------------------------------------------------------------------

/// Separable Gaussian blur with replicate padding (constants stay constant).
template <typename S>
Tensor<S> gaussian_blur(const Tensor<S>& x, double sigma, int ksize,
                        std::type_identity_t<GradTape<S>*> tape = nullptr) {
  if (ksize < 1 || ksize % 2 == 0)
    throw std::invalid_argument("gaussian_blur: kernel size must be odd and positive");
  if (sigma < 0) throw std::invalid_argument("gaussian_blur: sigma must be non-negative");
  const int C = x.dim(0);
  ArrayX<double> k1(ksize);
  if (sigma < 1e-6) {
    k1.setZero();
    k1[(ksize - 1) / 2] = 1.0;
  } else {
    for (int i = 0; i < ksize; ++i) {
      double d = i - (ksize - 1) / 2.0;
      k1[i] = std::exp(-d * d / (2 * sigma * sigma));
    }
    k1 /= k1.sum();
  }
  Tensor<S> kh({C, 1, ksize}), kv({C, ksize, 1});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < ksize; ++i) {
      kh.array_mut()[c * ksize + i] = static_cast<S>(k1[i]);
      kv.array_mut()[c * ksize + i] = static_cast<S>(k1[i]);
    }
  auto hpass = detail::depthwise_generic(x, kh, 1, 0, (ksize - 1) / 2, PadMode::Replicate, tape);
  return detail::depthwise_generic(hpass, kv, 1, (ksize - 1) / 2, 0, PadMode::Replicate, tape);
}

namespace detail {

/// 3x3 colour mix: hue rotation about the gray axis composed with a
/// saturation blend toward Rec.601 luma.
inline MatrixRM<double> color_mix_matrix(double saturation, double hue) {
  MatrixRM<double> sat(3, 3);
  const double lr = 0.299, lg = 0.587, lb = 0.114;
  sat << saturation + (1 - saturation) * lr, (1 - saturation) * lg, (1 - saturation) * lb,
      (1 - saturation) * lr, saturation + (1 - saturation) * lg, (1 - saturation) * lb,
      (1 - saturation) * lr, (1 - saturation) * lg, saturation + (1 - saturation) * lb;
  if (hue == 0.0) return sat;
  const double c = std::cos(hue), s = std::sin(hue);
  const double ax = 1.0 / std::sqrt(3.0);
  MatrixRM<double> rot(3, 3);
  rot << c + (1 - c) / 3, (1 - c) / 3 - s * ax, (1 - c) / 3 + s * ax,
      (1 - c) / 3 + s * ax, c + (1 - c) / 3, (1 - c) / 3 - s * ax,
      (1 - c) / 3 - s * ax, (1 - c) / 3 + s * ax, c + (1 - c) / 3;
  return rot * sat;
}

}  // namespace detail

/// Affine brightness/contrast followed by saturation/hue channel mixing.
template <typename S>
Tensor<S> color_contrast(const Tensor<S>& x, double brightness, double contrast,
                         double saturation, double hue,
                         std::type_identity_t<GradTape<S>*> tape = nullptr) {
  if (contrast <= 0) throw std::invalid_argument("color_contrast: contrast must be positive");
  if (saturation < 0) throw std::invalid_argument("color_contrast: saturation must be >= 0");
  if (std::abs(brightness) > 1)
    throw std::invalid_argument("color_contrast: |brightness| must be <= 1");
  Tensor<S> y = scale(x, static_cast<S>(contrast), tape);
  const double offset = 0.5 - 0.5 * contrast + brightness;
  if (offset != 0.0) y = add_scalar(y, static_cast<S>(offset), tape);
  if (saturation != 1.0 || hue != 0.0) {
    MatrixRM<double> m = detail::color_mix_matrix(saturation, hue);
    Tensor<S> w({3, 3});
    for (int i = 0; i < 9; ++i) w.array_mut()[i] = static_cast<S>(m(i / 3, i % 3));
    y = conv2d_pointwise(y, w, Tensor<S>::zeros({3}), tape);
  }
  if (brightness == 0.0 && contrast == 1.0 && saturation == 1.0 && hue == 0.0) return y;
  return clamp01_st(y, tape);
}

/// Named approximations of common photo filters: fixed compositions of the
/// colour/contrast building blocks.
template <typename S>
Tensor<S> filter_preset(const Tensor<S>& x, const std::string& name,
                        std::type_identity_t<GradTape<S>*> tape = nullptr) {
  if (name == "warm") {
    auto y = color_contrast(x, 0.02, 1.05, 1.15, -0.06, tape);
    Tensor<S> tint = Tensor<S>::from_values({3}, {S(1.04), S(1.0), S(0.94)});
    Tensor<S> w = Tensor<S>::zeros({3, 3});
    for (int i = 0; i < 3; ++i) w.array_mut()[i * 3 + i] = tint(i);
    return clamp01_st(conv2d_pointwise(y, w, Tensor<S>::zeros({3}), tape), tape);
  }
  if (name == "high_contrast") return color_contrast(x, 0.0, 1.3, 1.1, 0.0, tape);
  if (name == "desaturate") return color_contrast(x, 0.01, 1.02, 0.45, 0.0, tape);
  throw std::invalid_argument("filter_preset: unknown preset " + name);
}

/// Samples a tamper rectangle covering ~area_fraction of the image.
inline TamperRect sample_tamper_rect(int H, int W, double area_fraction, Rng& rng) {
  if (area_fraction < 0 || area_fraction > 1)
    throw std::invalid_argument("local_tamper: area fraction must lie in [0,1]");
  if (area_fraction == 0.0) return {};
  if (area_fraction >= 1.0) return {0, 0, H, W};
  const double target = area_fraction * H * W;
  for (int attempt = 0; attempt < 16; ++attempt) {
    double aspect = rng.uniform(0.5, 2.0);
    int rh = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    int rw = static_cast<int>(std::lround(target / std::max(1, rh)));
    rh = std::min(std::max(rh, 1), H);
    rw = std::min(std::max(rw, 1), W);
    if (rh <= 0 || rw <= 0) continue;
    int y = rng.uniform_int(0, H - rh);
    int x = rng.uniform_int(0, W - rw);
    return {y, x, rh, rw};
  }
  throw std::invalid_argument("local_tamper: could not sample a rectangle");
}

/// Replaces a rectangle by a differentiable mask blend. Pixels outside the
/// mask are bit-identical to the input. Returns the mask when requested.
template <typename S>
Tensor<S> local_tamper(const Tensor<S>& x, const TamperRect& rect, TamperFill fill,
                       std::type_identity_t<GradTape<S>*> tape = nullptr,
                       std::type_identity_t<const Tensor<S>*> patch_source = nullptr,
                       std::type_identity_t<Tensor<S>*> mask_out = nullptr) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<S> mask({1, H, W});
  if (!rect.empty()) {
    auto& m = mask.array_mut();
    for (int yy = rect.y; yy < rect.y + rect.h; ++yy)
      for (int xx = rect.x; xx < rect.x + rect.w; ++xx)
        m[static_cast<std::int64_t>(yy) * W + xx] = S(1);
  }
  if (mask_out) *mask_out = mask;
  if (rect.empty()) return x;

  Tensor<S> mask3({C, H, W});
  for (int c = 0; c < C; ++c)
    mask3.array_mut().segment(static_cast<std::int64_t>(c) * H * W, static_cast<std::int64_t>(H) * W) =
        mask.array();

  Tensor<S> fill_img;
  switch (fill) {
    case TamperFill::Patch: {
      if (patch_source) {
        require_same_shape(x, *patch_source, "local_tamper");
        fill_img = *patch_source;
      } else {
        // fall back to the input rotated 180 degrees, as a constant source
        fill_img = Tensor<S>({C, H, W});
        auto& f = fill_img.array_mut();
        const auto& v = x.array();
        for (int c = 0; c < C; ++c)
          for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx)
              f[(static_cast<std::int64_t>(c) * H + yy) * W + xx] =
                  v[(static_cast<std::int64_t>(c) * H + (H - 1 - yy)) * W + (W - 1 - xx)];
      }
      break;
    }
    case TamperFill::Blur:
      fill_img = gaussian_blur(x, std::max(2.0, 0.5 * std::min(rect.h, rect.w)), 9, tape);
      break;
    case TamperFill::MeanColor: {
      const S inv_count = S(1) / static_cast<S>(rect.h * static_cast<std::int64_t>(rect.w));
      std::vector<Tensor<S>> planes;
      for (int c = 0; c < C; ++c) {
        auto chan = slice_channels(x, c, 1, tape);
        auto masked = mul(chan, mask, tape);
        auto m_c = scale(sum(masked, tape), inv_count, tape);
        planes.push_back(broadcast_scalar(m_c, {1, H, W}, tape));
      }
      fill_img = planes[0];
      for (int c = 1; c < C; ++c) fill_img = concat_channels(fill_img, planes[static_cast<std::size_t>(c)], tape);
      break;
    }
  }
  // y = x + mask * (fill - x); exact identity outside the mask
  return add(x, mul(mask3, sub(fill_img, x, tape), tape), tape);
}

/// Applies a concrete transform. `patch_source` feeds tamper patch fills;
/// only benign, differentiable kinds record on the tape.
template <typename S>
Tensor<S> apply_transform(const TransformSpec& t, const Tensor<S>& x,
                          std::type_identity_t<GradTape<S>*> tape = nullptr,
                          std::type_identity_t<const Tensor<S>*> patch_source = nullptr,
                          std::type_identity_t<Tensor<S>*> mask_out = nullptr) {
  switch (t.kind) {
    case TransformKind::Identity: return x;
    case TransformKind::JpegApprox: return jpeg::jpeg_approx_diff(x, t.quality, tape);
    case TransformKind::JpegRoundtrip:
      return jpeg::jpeg_roundtrip(x, t.quality, t.subsample_420);
    case TransformKind::GaussianBlur: return gaussian_blur(x, t.sigma, t.ksize, tape);
    case TransformKind::ColorContrast:
      return color_contrast(x, t.brightness, t.contrast, t.saturation, t.hue, tape);
    case TransformKind::FilterPreset: return filter_preset(x, t.preset, tape);
    case TransformKind::LocalTamper:
      return local_tamper(x, t.rect, t.fill, tape, patch_source, mask_out);
  }
  throw std::logic_error("apply_transform: unhandled kind");
}

/// Draws a concrete transform from the distribution; deterministic under a
/// seeded rng. Image shape is needed to resolve tamper rectangles.
inline TransformSpec sample_transform(const TransformDist& dist, int height, int width,
                                      Rng& rng) {
  dist.validate();
  double total = 0;
  for (const auto& e : dist.entries) total += e.weight;
  double pick = rng.uniform(0, total);
  std::size_t idx = 0;
  for (; idx + 1 < dist.entries.size(); ++idx) {
    pick -= dist.entries[idx].weight;
    if (pick < 0) break;
  }
  const TransformRange& e = dist.entries[idx];

  TransformSpec s;
  s.kind = e.kind;
  switch (e.kind) {
    case TransformKind::Identity: break;
    case TransformKind::JpegApprox:
    case TransformKind::JpegRoundtrip:
      s.quality = rng.uniform_int(e.quality[0], e.quality[1]);
      s.subsample_420 = e.subsample_420;
      break;
    case TransformKind::GaussianBlur:
      s.sigma = rng.uniform(e.sigma[0], e.sigma[1]);
      s.ksize = e.ksize;
      break;
    case TransformKind::ColorContrast:
      s.brightness = rng.uniform(e.brightness[0], e.brightness[1]);
      s.contrast = rng.uniform(e.contrast[0], e.contrast[1]);
      s.saturation = rng.uniform(e.saturation[0], e.saturation[1]);
      s.hue = rng.uniform(e.hue[0], e.hue[1]);
      break;
    case TransformKind::FilterPreset:
      s.preset = e.presets[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(e.presets.size()) - 1))];
      break;
    case TransformKind::LocalTamper:
      s.area = rng.uniform(e.area[0], e.area[1]);
      s.fill = e.fills[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(e.fills.size()) - 1))];
      s.rect = sample_tamper_rect(height, width, s.area, rng);
      break;
  }
  return s;
}

}  // namespace faststamp
