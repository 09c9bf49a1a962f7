#pragma once

#include "faststamp/rng.hpp"
#include "faststamp/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace faststamp {

/// Smooth procedural RGB image in [0.05, 0.95]: low-frequency gratings, a soft
/// blob, and a gentle gradient. Deterministic per seed; stands in for natural
/// photos at desk scale.
template <typename S>
Tensor<S> synthetic_image(std::uint64_t seed, int h, int w) {
  Rng rng(Rng::mix(seed, 0x517e));
  Tensor<S> img({3, h, w});
  auto& a = img.array_mut();
  const double tau = 6.283185307179586;
  double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
  for (int c = 0; c < 3; ++c) {
    double fx = rng.uniform(0.5, 3.0), fy = rng.uniform(0.5, 3.0);
    double px = rng.uniform(0, tau), py = rng.uniform(0, tau);
    double bx = rng.uniform(0.2, 0.8) * w, by = rng.uniform(0.2, 0.8) * h;
    double rad = rng.uniform(0.1, 0.35) * std::min(h, w);
    double amp = rng.uniform(0.15, 0.3);
    double blob = rng.uniform(0.15, 0.3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.5 + amp * std::sin(tau * fx * x / w + px) * std::cos(tau * fy * y / h + py);
        double d2 = ((x - bx) * (x - bx) + (y - by) * (y - by)) / (rad * rad);
        v += blob * std::exp(-d2);
        v += gx * (static_cast<double>(x) / w - 0.5) + gy * (static_cast<double>(y) / h - 0.5);
        v = 0.05 + 0.9 * std::clamp(v, 0.0, 1.0);
        a[(static_cast<std::int64_t>(c) * h + y) * w + x] = static_cast<S>(v);
      }
  }
  return img;
}

/// A deterministic bank of synthetic images.
template <typename S>
std::vector<Tensor<S>> synthetic_dataset(std::uint64_t seed, int count, int h, int w) {
  std::vector<Tensor<S>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(synthetic_image<S>(Rng::mix(seed, static_cast<std::uint64_t>(i)), h, w));
  return out;
}

}  // namespace faststamp
