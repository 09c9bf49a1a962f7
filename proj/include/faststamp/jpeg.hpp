#pragma once

#include "faststamp/ops.hpp"

#include <Eigen/LU>
#include "faststamp/tape.hpp"
#include "faststamp/tensor.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace faststamp {
namespace jpeg {

// Annex-K base quantization tables, zig-zag-free (row-major u*8+v).
inline constexpr std::array<int, 64> kLumaBase = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline constexpr std::array<int, 64> kChromaBase = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

/// libjpeg quality scaling: scale = 5000/q below 50, else 200-2q; entries
/// clamped to [1,255].
inline std::array<int, 64> scaled_table(const std::array<int, 64>& base, int quality) {
  if (quality < 1 || quality > 100)
    throw std::invalid_argument("jpeg: quality must be in [1,100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> t{};
  for (int i = 0; i < 64; ++i) {
    int v = (base[static_cast<std::size_t>(i)] * scale + 50) / 100;
    t[static_cast<std::size_t>(i)] = v < 1 ? 1 : (v > 255 ? 255 : v);
  }
  return t;
}

/// Orthonormal 8-point DCT-II matrix.
inline MatrixRM<double> dct8_matrix() {
  MatrixRM<double> t(8, 8);
  const double pi = 3.14159265358979323846;
  for (int u = 0; u < 8; ++u) {
    double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
    for (int x = 0; x < 8; ++x) t(u, x) = a * std::cos((2 * x + 1) * u * pi / 16.0);
  }
  return t;
}

/// 64x64 operator applying the 2-D DCT to a vectorized 8x8 block (kron(T,T)).
inline MatrixRM<double> dct64_matrix() {
  MatrixRM<double> t = dct8_matrix();
  MatrixRM<double> m(64, 64);
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) m(u * 8 + v, y * 8 + x) = t(u, y) * t(v, x);
  return m;
}

// JFIF full-range RGB<->YCbCr. Offsets are in unit scale; Cb/Cr stored +0.5.
inline MatrixRM<double> rgb2ycc_matrix() {
  MatrixRM<double> m(3, 3);
  m << 0.299, 0.587, 0.114,
      -0.168735892, -0.331264108, 0.5,
      0.5, -0.418687589, -0.081312411;
  return m;
}

// ---------------------------------------------------------------------------
// Blocked layout ops (tape-aware)
// ---------------------------------------------------------------------------

/// Rearranges (C,H,W) into (64, C*nb) where column c*nb+b holds the b-th 8x8
/// block of channel c, vectorized row-major.
template <typename S>
Tensor<S> to_blocks8(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % 8 != 0 || W % 8 != 0)
    throw std::invalid_argument("jpeg: image dimensions must be multiples of 8");
  const int bh = H / 8, bw = W / 8, nb = bh * bw;
  const std::int64_t cols = static_cast<std::int64_t>(C) * nb;
  Tensor<S> out({64, static_cast<int>(cols)});
  {
    auto& o = out.array_mut();
    const auto& v = x.array();
    for (int c = 0; c < C; ++c)
      for (int by = 0; by < bh; ++by)
        for (int bx = 0; bx < bw; ++bx) {
          std::int64_t col = static_cast<std::int64_t>(c) * nb + by * bw + bx;
          for (int u = 0; u < 8; ++u)
            for (int w2 = 0; w2 < 8; ++w2)
              o[(u * 8 + w2) * cols + col] =
                  v[(static_cast<std::int64_t>(c) * H + by * 8 + u) * W + bx * 8 + w2];
        }
  }
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [C, H, W](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           const int bh = H / 8, bw = W / 8, nb = bh * bw;
                           const std::int64_t cols = static_cast<std::int64_t>(C) * nb;
                           ArrayX<S> gx(static_cast<Eigen::Index>(C) * H * W);
                           for (int c = 0; c < C; ++c)
                             for (int by = 0; by < bh; ++by)
                               for (int bx = 0; bx < bw; ++bx) {
                                 std::int64_t col = static_cast<std::int64_t>(c) * nb + by * bw + bx;
                                 for (int u = 0; u < 8; ++u)
                                   for (int w2 = 0; w2 < 8; ++w2)
                                     gx[(static_cast<std::int64_t>(c) * H + by * 8 + u) * W +
                                        bx * 8 + w2] = g[(u * 8 + w2) * cols + col];
                               }
                           GradTape<S>::add_to(s[0], gx);
                         });
  return out;
}

/// Inverse of to_blocks8.
template <typename S>
Tensor<S> from_blocks8(const Tensor<S>& blocks, int C, int H, int W,
                       GradTape<S>* tape = nullptr) {
  const int bh = H / 8, bw = W / 8, nb = bh * bw;
  const std::int64_t cols = static_cast<std::int64_t>(C) * nb;
  if (blocks.dim(0) != 64 || blocks.dim(1) != cols)
    throw std::invalid_argument("jpeg: block tensor shape mismatch");
  Tensor<S> out({C, H, W});
  {
    auto& o = out.array_mut();
    const auto& v = blocks.array();
    for (int c = 0; c < C; ++c)
      for (int by = 0; by < bh; ++by)
        for (int bx = 0; bx < bw; ++bx) {
          std::int64_t col = static_cast<std::int64_t>(c) * nb + by * bw + bx;
          for (int u = 0; u < 8; ++u)
            for (int w2 = 0; w2 < 8; ++w2)
              o[(static_cast<std::int64_t>(c) * H + by * 8 + u) * W + bx * 8 + w2] =
                  v[(u * 8 + w2) * cols + col];
        }
  }
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(blocks)},
                         [C, H, W](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           const int bh = H / 8, bw = W / 8, nb = bh * bw;
                           const std::int64_t cols = static_cast<std::int64_t>(C) * nb;
                           ArrayX<S> gb(64 * cols);
                           for (int c = 0; c < C; ++c)
                             for (int by = 0; by < bh; ++by)
                               for (int bx = 0; bx < bw; ++bx) {
                                 std::int64_t col = static_cast<std::int64_t>(c) * nb + by * bw + bx;
                                 for (int u = 0; u < 8; ++u)
                                   for (int w2 = 0; w2 < 8; ++w2)
                                     gb[(u * 8 + w2) * cols + col] =
                                         g[(static_cast<std::int64_t>(c) * H + by * 8 + u) * W +
                                           bx * 8 + w2];
                               }
                           GradTape<S>::add_to(s[0], gb);
                         });
  return out;
}

/// out = M * blocks for a constant 64x64 operator; adjoint is M^T.
template <typename S>
Tensor<S> block_matrix_apply(const Tensor<S>& blocks, const MatrixRM<S>& m,
                             GradTape<S>* tape = nullptr) {
  const Eigen::Index cols = blocks.dim(1);
  Tensor<S> out({64, static_cast<int>(cols)});
  {
    Eigen::Map<const MatrixRM<S>> B(blocks.array().data(), 64, cols);
    Eigen::Map<MatrixRM<S>> O(out.array_mut().data(), 64, cols);
    O.noalias() = m * B;
  }
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(blocks)},
                         [m, cols](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           ArrayX<S> gb(64 * cols);
                           Eigen::Map<const MatrixRM<S>> G(g.data(), 64, cols);
                           Eigen::Map<MatrixRM<S>>(gb.data(), 64, cols).noalias() =
                               m.transpose() * G;
                           GradTape<S>::add_to(s[0], gb);
                         });
  return out;
}

/// Multiplies coefficient (k, c*nb+b) by factors(k, c); diagonal, self-adjoint.
template <typename S>
Tensor<S> scale_coeffs(const Tensor<S>& blocks, const MatrixRM<S>& factors, int nb,
                       GradTape<S>* tape = nullptr) {
  const int C = static_cast<int>(factors.cols());
  const std::int64_t cols = blocks.dim(1);
  if (cols != static_cast<std::int64_t>(C) * nb || factors.rows() != 64)
    throw std::invalid_argument("jpeg: factor matrix shape mismatch");
  auto apply = [C, nb, cols, factors](const ArrayX<S>& in) {
    ArrayX<S> out(in.size());
    for (int k = 0; k < 64; ++k)
      for (int c = 0; c < C; ++c) {
        std::int64_t base = k * cols + static_cast<std::int64_t>(c) * nb;
        out.segment(base, nb) = in.segment(base, nb) * factors(k, c);
      }
    return out;
  };
  Tensor<S> out(blocks.shape(), apply(blocks.array()));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(blocks)},
                         [apply](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           GradTape<S>::add_to(s[0], apply(g));
                         });
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable path
// ---------------------------------------------------------------------------

/// Differentiable JPEG: YCbCr, 8x8 DCT, quality-scaled quantization with
/// straight-through rounding, inverse path, clamp. `hard_round=false` replaces
/// the rounding stage by the identity (the smooth surrogate whose gradient the
/// straight-through backward computes); training uses the default.
template <typename S>
Tensor<S> jpeg_approx_diff(const Tensor<S>& x, int quality,
                           std::type_identity_t<GradTape<S>*> tape = nullptr,
                           bool hard_round = true) {
  if (x.rank() != 3 || x.dim(0) != 3)
    throw std::invalid_argument("jpeg_approx_diff: expects an RGB image (3,H,W)");
  const int H = x.dim(1), W = x.dim(2);
  if (H % 8 != 0 || W % 8 != 0)
    throw std::invalid_argument("jpeg_approx_diff: dimensions must be multiples of 8");
  const int nb = (H / 8) * (W / 8);

  MatrixRM<double> fwd_d = rgb2ycc_matrix();
  MatrixRM<double> inv_d = fwd_d.inverse().eval();
  MatrixRM<S> fwd = fwd_d.template cast<S>();
  Tensor<S> fwd_w({3, 3});
  fwd_w.array_mut() = Eigen::Map<const ArrayX<S>>(fwd.data(), 9);
  // level shift (-128 in 8-bit scale) applied to Y; Cb/Cr offsets cancel it
  const double kShift = 128.0 / 255.0;
  Tensor<S> fwd_b = Tensor<S>::from_values({3}, {static_cast<S>(-kShift), S(0), S(0)});
  MatrixRM<S> inv = inv_d.template cast<S>();
  Tensor<S> inv_w({3, 3});
  inv_w.array_mut() = Eigen::Map<const ArrayX<S>>(inv.data(), 9);
  // forward produced (Y-shift, Cb, Cr); rgb = Minv*(v + [shift,0,0])
  Tensor<S> inv_b({3});
  {
    Eigen::Vector3d off(kShift, 0.0, 0.0);
    Eigen::Vector3d b = inv_d * off;
    for (int i = 0; i < 3; ++i) inv_b.array_mut()[i] = static_cast<S>(b[i]);
  }

  auto tblY = scaled_table(kLumaBase, quality);
  auto tblC = scaled_table(kChromaBase, quality);
  MatrixRM<S> div(64, 3), mulf(64, 3);
  for (int k = 0; k < 64; ++k) {
    div(k, 0) = static_cast<S>(255.0 / tblY[static_cast<std::size_t>(k)]);
    div(k, 1) = div(k, 2) = static_cast<S>(255.0 / tblC[static_cast<std::size_t>(k)]);
    mulf(k, 0) = static_cast<S>(tblY[static_cast<std::size_t>(k)] / 255.0);
    mulf(k, 1) = mulf(k, 2) = static_cast<S>(tblC[static_cast<std::size_t>(k)] / 255.0);
  }

  MatrixRM<S> dct = dct64_matrix().template cast<S>();
  MatrixRM<S> idct = dct.transpose().eval();

  auto ycc = conv2d_pointwise(x, fwd_w, fwd_b, tape);
  auto blocks = to_blocks8(ycc, tape);
  auto coeffs = block_matrix_apply(blocks, dct, tape);
  auto quantized = scale_coeffs(coeffs, div, nb, tape);
  if (hard_round) quantized = round_st(quantized, tape);
  auto dequant = scale_coeffs(quantized, mulf, nb, tape);
  auto rec = block_matrix_apply(dequant, idct, tape);
  auto img = from_blocks8(rec, 3, H, W, tape);
  auto rgb = conv2d_pointwise(img, inv_w, inv_b, tape);
  return clamp01_st(rgb, tape);
}

// ---------------------------------------------------------------------------
// Exact baseline round-trip (not differentiable)
// ---------------------------------------------------------------------------

/// Baseline JPEG encode+decode at the given quality on 8-bit samples:
/// quantized-coefficient reconstruction with float DCT, 4:4:4 by default.
/// Entropy coding is lossless and does not affect round-trip pixels.
template <typename S>
Tensor<S> jpeg_roundtrip(const Tensor<S>& x, int quality, bool subsample_420 = false) {
  if (x.rank() != 3 || x.dim(0) != 3)
    throw std::invalid_argument("jpeg_roundtrip: expects an RGB image (3,H,W)");
  const int H = x.dim(1), W = x.dim(2);
  if (H % 8 != 0 || W % 8 != 0)
    throw std::invalid_argument("jpeg_roundtrip: dimensions must be multiples of 8");
  if (subsample_420 && (H % 16 != 0 || W % 16 != 0))
    throw std::invalid_argument("jpeg_roundtrip: 4:2:0 needs dimensions divisible by 16");

  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  // 8-bit samples
  ArrayX<double> r(hw), g(hw), b(hw);
  for (std::int64_t i = 0; i < hw; ++i) {
    r[i] = std::min(255.0, std::max(0.0, std::round(255.0 * static_cast<double>(x.array()[i]))));
    g[i] = std::min(255.0, std::max(0.0, std::round(255.0 * static_cast<double>(x.array()[hw + i]))));
    b[i] = std::min(255.0, std::max(0.0, std::round(255.0 * static_cast<double>(x.array()[2 * hw + i]))));
  }
  ArrayX<double> Y = 0.299 * r + 0.587 * g + 0.114 * b;
  ArrayX<double> Cb = -0.168735892 * r - 0.331264108 * g + 0.5 * b + 128.0;
  ArrayX<double> Cr = 0.5 * r - 0.418687589 * g - 0.081312411 * b + 128.0;

  auto box_down = [&](const ArrayX<double>& p) {
    ArrayX<double> q(hw / 4);
    for (int yy = 0; yy < H / 2; ++yy)
      for (int xx = 0; xx < W / 2; ++xx)
        q[yy * static_cast<std::int64_t>(W / 2) + xx] =
            (p[(2 * yy) * static_cast<std::int64_t>(W) + 2 * xx] +
             p[(2 * yy) * static_cast<std::int64_t>(W) + 2 * xx + 1] +
             p[(2 * yy + 1) * static_cast<std::int64_t>(W) + 2 * xx] +
             p[(2 * yy + 1) * static_cast<std::int64_t>(W) + 2 * xx + 1]) /
            4.0;
    return q;
  };
  auto rep_up = [&](const ArrayX<double>& q) {
    ArrayX<double> p(hw);
    for (int yy = 0; yy < H; ++yy)
      for (int xx = 0; xx < W; ++xx)
        p[yy * static_cast<std::int64_t>(W) + xx] =
            q[(yy / 2) * static_cast<std::int64_t>(W / 2) + xx / 2];
    return p;
  };

  MatrixRM<double> T = dct8_matrix();
  auto codec_plane = [&](ArrayX<double>& plane, int ph, int pw, const std::array<int, 64>& tbl) {
    MatrixRM<double> blk(8, 8), tmp(8, 8);
    for (int by = 0; by < ph / 8; ++by)
      for (int bx = 0; bx < pw / 8; ++bx) {
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v)
            blk(u, v) = plane[(by * 8 + u) * static_cast<std::int64_t>(pw) + bx * 8 + v] - 128.0;
        tmp = T * blk * T.transpose();
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double q = tbl[static_cast<std::size_t>(u * 8 + v)];
            tmp(u, v) = std::round(tmp(u, v) / q) * q;
          }
        blk = T.transpose() * tmp * T;
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v)
            plane[(by * 8 + u) * static_cast<std::int64_t>(pw) + bx * 8 + v] = blk(u, v) + 128.0;
      }
  };

  auto tblY = scaled_table(kLumaBase, quality);
  auto tblC = scaled_table(kChromaBase, quality);
  codec_plane(Y, H, W, tblY);
  if (subsample_420) {
    ArrayX<double> cb2 = box_down(Cb), cr2 = box_down(Cr);
    codec_plane(cb2, H / 2, W / 2, tblC);
    codec_plane(cr2, H / 2, W / 2, tblC);
    Cb = rep_up(cb2);
    Cr = rep_up(cr2);
  } else {
    codec_plane(Cb, H, W, tblC);
    codec_plane(Cr, H, W, tblC);
  }

  Tensor<S> out({3, H, W});
  auto& o = out.array_mut();
  for (std::int64_t i = 0; i < hw; ++i) {
    double cb = Cb[i] - 128.0, cr = Cr[i] - 128.0;
    double rr = Y[i] + 1.402 * cr;
    double gg = Y[i] - 0.344136286 * cb - 0.714136286 * cr;
    double bb = Y[i] + 1.772 * cb;
    auto to_u8 = [](double v) {
      return std::min(255.0, std::max(0.0, std::round(v)));
    };
    o[i] = static_cast<S>(to_u8(rr) / 255.0);
    o[hw + i] = static_cast<S>(to_u8(gg) / 255.0);
    o[2 * hw + i] = static_cast<S>(to_u8(bb) / 255.0);
  }
  return out;
}

}  // namespace jpeg
}  // namespace faststamp
