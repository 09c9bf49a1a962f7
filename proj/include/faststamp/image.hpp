#pragma once

#include "faststamp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace faststamp {

/// 8-bit RGB raster, interleaved row-major.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  bool valid() const {
    return height > 0 && width > 0 &&
           data.size() == static_cast<std::size_t>(height) * width * 3;
  }
};

/// Pixels scaled to [0,1] (v/255), planar (3,H,W).
template <typename S>
Tensor<S> image_to_tensor(const ImageU8& img) {
  if (!img.valid()) throw std::invalid_argument("image_to_tensor: malformed image");
  Tensor<S> t({3, img.height, img.width});
  auto& a = t.array_mut();
  const std::int64_t hw = static_cast<std::int64_t>(img.height) * img.width;
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      a[c * hw + i] = static_cast<S>(img.data[static_cast<std::size_t>(i * 3 + c)] / S(255));
  return t;
}

/// Quantized by round(255*v) after clamping to [0,1].
template <typename S>
ImageU8 tensor_to_image(const Tensor<S>& t) {
  if (t.rank() != 3 || t.dim(0) != 3)
    throw std::invalid_argument("tensor_to_image: expects (3,H,W)");
  ImageU8 img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  const std::int64_t hw = static_cast<std::int64_t>(img.height) * img.width;
  img.data.resize(static_cast<std::size_t>(hw) * 3);
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) {
      double v = std::clamp(static_cast<double>(t.array()[c * hw + i]), 0.0, 1.0);
      img.data[static_cast<std::size_t>(i * 3 + c)] =
          static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

}  // namespace faststamp
