#pragma once

#include "faststamp/tape.hpp"
#include "faststamp/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace faststamp {

enum class PadMode { Zero, Replicate };
enum class BnMode { Train, Infer };

template <typename S>
struct BatchStats {
  ArrayX<S> mean;
  ArrayX<S> var;
};

namespace detail {

template <typename S>
void maybe_attach(GradTape<S>* tape, Tensor<S>& out, std::vector<int> parents,
                  typename GradTape<S>::PullFn pull) {
  if (!tape) return;
  bool any = false;
  for (int p : parents) any = any || (p >= 0);
  if (!any) return;
  tape->attach(out, std::move(parents), std::move(pull));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  require_same_shape(a, b, "add");
  Tensor<S> out(a.shape(), a.array() + b.array());
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(a), tape->node_of(b)},
                         [](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           GradTape<S>::add_to(s[0], g);
                           GradTape<S>::add_to(s[1], g);
                         });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  require_same_shape(a, b, "sub");
  Tensor<S> out(a.shape(), a.array() - b.array());
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(a), tape->node_of(b)},
                         [](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           GradTape<S>::add_to(s[0], g);
                           if (s[1]) GradTape<S>::add_to(s[1], (-g).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  require_same_shape(a, b, "mul");
  Tensor<S> out(a.shape(), a.array() * b.array());
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(a), tape->node_of(b)},
                         [a, b](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (s[0]) GradTape<S>::add_to(s[0], (b.array() * g).eval());
                           if (s[1]) GradTape<S>::add_to(s[1], (a.array() * g).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.array() * c);
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [c](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (s[0]) GradTape<S>::add_to(s[0], (g * c).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.array() + c);
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           GradTape<S>::add_to(s[0], g);
                         });
  return out;
}

template <typename S>
Tensor<S> abs_val(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.array().abs());
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [x](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           ArrayX<S> sign = (x.array() > S(0)).template cast<S>() -
                                            (x.array() < S(0)).template cast<S>();
                           GradTape<S>::add_to(s[0], (sign * g).eval());
                         });
  return out;
}

/// Elementwise min(x, c); gradient is passed only where x < c.
template <typename S>
Tensor<S> min_scalar(const Tensor<S>& x, S c, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.array().min(c));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [x, c](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           ArrayX<S> m = (x.array() < c).template cast<S>();
                           GradTape<S>::add_to(s[0], (m * g).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.array().max(S(0)));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [x](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           ArrayX<S> m = (x.array() > S(0)).template cast<S>();
                           GradTape<S>::add_to(s[0], (m * g).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> tanh_act(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  // keep outputs strictly inside (-1,1): tanh of large args rounds to +-1
  const S lim = std::nextafter(S(1), S(0));
  Tensor<S> out(x.shape(), x.array().tanh().min(lim).max(-lim));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [out](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           GradTape<S>::add_to(s[0], ((S(1) - out.array().square()) * g).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), S(1) / (S(1) + (-x.array()).exp()));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [out](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           GradTape<S>::add_to(
                               s[0], (out.array() * (S(1) - out.array()) * g).eval());
                         });
  return out;
}

/// Clamp to [0,1]; straight-through gradient inside the open interval.
template <typename S>
Tensor<S> clamp01_st(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.array().max(S(0)).min(S(1)));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [x](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           ArrayX<S> m = ((x.array() > S(0)) && (x.array() < S(1)))
                                             .template cast<S>();
                           GradTape<S>::add_to(s[0], (m * g).eval());
                         });
  return out;
}

/// Round half away from zero; identity gradient (straight-through).
template <typename S>
Tensor<S> round_st(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.array().round());
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           GradTape<S>::add_to(s[0], g);
                         });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions & shape
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  Tensor<S> out({1}, ArrayX<S>::Constant(1, x.array().sum()));
  std::int64_t n = x.size();
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [n](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           GradTape<S>::add_to(s[0], ArrayX<S>::Constant(n, g[0]).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, GradTape<S>* tape = nullptr) {
  std::int64_t n = x.size();
  Tensor<S> out({1}, ArrayX<S>::Constant(1, x.array().sum() / S(n)));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [n](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           GradTape<S>::add_to(s[0],
                                               ArrayX<S>::Constant(n, g[0] / S(n)).eval());
                         });
  return out;
}

/// Fills a tensor of the given shape with the scalar value of t (size 1).
template <typename S>
Tensor<S> broadcast_scalar(const Tensor<S>& t, Shape shape, GradTape<S>* tape = nullptr) {
  if (t.size() != 1) throw std::invalid_argument("broadcast_scalar: source must be scalar");
  std::int64_t n = shape_size(shape);
  Tensor<S> out(std::move(shape), ArrayX<S>::Constant(n, t.value(0)));
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(t)},
                         [](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           GradTape<S>::add_to(s[0], ArrayX<S>::Constant(1, g.sum()).eval());
                         });
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape, GradTape<S>* tape = nullptr) {
  if (shape_size(new_shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor<S> out(new_shape, x.array());
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
                           GradTape<S>::add_to(s[0], g);
                         });
  return out;
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 GradTape<S>* tape = nullptr) {
  if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1)
    throw std::invalid_argument("linear: expects x(N,), w(M,N), b(M,)");
  const int n = x.dim(0), m = w.dim(0);
  if (w.dim(1) != n || b.dim(0) != m)
    throw std::invalid_argument("linear: dimension mismatch w" + shape_str(w.shape()) +
                                " x" + shape_str(x.shape()) + " b" + shape_str(b.shape()));
  Eigen::Map<const MatrixRM<S>> W(w.array().data(), m, n);
  Tensor<S> out({m});
  out.array_mut().matrix() = W * x.array().matrix() + b.array().matrix();
  if (tape)
    detail::maybe_attach(
        tape, out, {tape->node_of(x), tape->node_of(w), tape->node_of(b)},
        [x, w, m, n](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
          Eigen::Map<const MatrixRM<S>> W(w.array().data(), m, n);
          if (s[0]) {
            ArrayX<S> gx(n);
            gx.matrix().noalias() = W.transpose() * g.matrix();
            GradTape<S>::add_to(s[0], gx);
          }
          if (s[1]) {
            ArrayX<S> gw(static_cast<Eigen::Index>(m) * n);
            Eigen::Map<MatrixRM<S>>(gw.data(), m, n).noalias() =
                g.matrix() * x.array().matrix().transpose();
            GradTape<S>::add_to(s[1], gw);
          }
          if (s[2]) GradTape<S>::add_to(s[2], g);
        });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline int clamp_idx(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

/// Per-channel 2-D correlation with an arbitrary (possibly non-square) kernel.
template <typename S>
Tensor<S> depthwise_generic(const Tensor<S>& x, const Tensor<S>& k, int stride, int pad_y,
                            int pad_x, PadMode mode, GradTape<S>* tape) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Kh = k.dim(1), Kw = k.dim(2);
  const int Ho = conv_out_dim(H, Kh, stride, pad_y);
  const int Wo = conv_out_dim(W, Kw, stride, pad_x);
  Tensor<S> out({C, Ho, Wo});
  {
    auto& o = out.array_mut();
    const auto& xv = x.array();
    const auto& kv = k.array();
    for (int c = 0; c < C; ++c) {
      const S* kc = kv.data() + static_cast<std::int64_t>(c) * Kh * Kw;
      const S* xc = xv.data() + static_cast<std::int64_t>(c) * H * W;
      S* oc = o.data() + static_cast<std::int64_t>(c) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          S acc = 0;
          for (int u = 0; u < Kh; ++u) {
            int iy = oy * stride - pad_y + u;
            if (mode == PadMode::Replicate) iy = clamp_idx(iy, H);
            else if (iy < 0 || iy >= H) continue;
            for (int v = 0; v < Kw; ++v) {
              int ix = ox * stride - pad_x + v;
              if (mode == PadMode::Replicate) ix = clamp_idx(ix, W);
              else if (ix < 0 || ix >= W) continue;
              acc += kc[u * Kw + v] * xc[iy * W + ix];
            }
          }
          oc[oy * Wo + ox] = acc;
        }
    }
  }
  if (tape)
    maybe_attach(
        tape, out, {tape->node_of(x), tape->node_of(k)},
        [x, k, stride, pad_y, pad_x, mode, C, H, W, Kh, Kw, Ho,
         Wo](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
          const auto& xv = x.array();
          const auto& kv = k.array();
          ArrayX<S> gx, gk;
          if (s[0]) gx = ArrayX<S>::Zero(xv.size());
          if (s[1]) gk = ArrayX<S>::Zero(kv.size());
          for (int c = 0; c < C; ++c) {
            const S* kc = kv.data() + static_cast<std::int64_t>(c) * Kh * Kw;
            const S* xc = xv.data() + static_cast<std::int64_t>(c) * H * W;
            const S* gc = g.data() + static_cast<std::int64_t>(c) * Ho * Wo;
            S* gxc = s[0] ? gx.data() + static_cast<std::int64_t>(c) * H * W : nullptr;
            S* gkc = s[1] ? gk.data() + static_cast<std::int64_t>(c) * Kh * Kw : nullptr;
            for (int oy = 0; oy < Ho; ++oy)
              for (int ox = 0; ox < Wo; ++ox) {
                S go = gc[oy * Wo + ox];
                if (go == S(0)) continue;
                for (int u = 0; u < Kh; ++u) {
                  int iy = oy * stride - pad_y + u;
                  if (mode == PadMode::Replicate) iy = clamp_idx(iy, H);
                  else if (iy < 0 || iy >= H) continue;
                  for (int v = 0; v < Kw; ++v) {
                    int ix = ox * stride - pad_x + v;
                    if (mode == PadMode::Replicate) ix = clamp_idx(ix, W);
                    else if (ix < 0 || ix >= W) continue;
                    if (gxc) gxc[iy * W + ix] += kc[u * Kw + v] * go;
                    if (gkc) gkc[u * Kw + v] += xc[iy * W + ix] * go;
                  }
                }
              }
          }
          if (s[0]) GradTape<S>::add_to(s[0], gx);
          if (s[1]) GradTape<S>::add_to(s[1], gk);
        });
  return out;
}

}  // namespace detail

/// Depthwise convolution: channel c of the output is the 2-D correlation of
/// channel c of the input with kernels[c]. Same-padding, so H' = ceil(H/stride).
template <typename S>
Tensor<S> conv2d_depthwise(const Tensor<S>& x, const Tensor<S>& kernels, int stride,
                           int padding, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3 || kernels.rank() != 3)
    throw std::invalid_argument("conv2d_depthwise: expects x(C,H,W), kernels(C,K,K)");
  if (kernels.dim(0) != x.dim(0))
    throw std::invalid_argument("conv2d_depthwise: channel mismatch, input C=" +
                                std::to_string(x.dim(0)) + " kernels C=" +
                                std::to_string(kernels.dim(0)));
  const int k = kernels.dim(1);
  if (kernels.dim(2) != k || k % 2 == 0)
    throw std::invalid_argument("conv2d_depthwise: kernel must be square with odd size");
  if (stride != 1 && stride != 2)
    throw std::invalid_argument("conv2d_depthwise: stride must be 1 or 2");
  if (padding != (k - 1) / 2)
    throw std::invalid_argument("conv2d_depthwise: same-padding requires padding=(K-1)/2");
  return detail::depthwise_generic(x, kernels, stride, padding, padding, PadMode::Zero, tape);
}

/// Pointwise (1x1) convolution: matrix-vector multiply along the channel axis
/// at every spatial cell. out[o,h,w] = sum_i weights[o,i]*in[i,h,w] + bias[o].
template <typename S>
Tensor<S> conv2d_pointwise(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                           GradTape<S>* tape = nullptr) {
  if (x.rank() != 3 || w.rank() != 2 || b.rank() != 1)
    throw std::invalid_argument("conv2d_pointwise: expects x(Cin,H,W), w(Cout,Cin), b(Cout)");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0);
  if (w.dim(1) != cin || b.dim(0) != cout)
    throw std::invalid_argument("conv2d_pointwise: dimension mismatch w" +
                                shape_str(w.shape()) + " x" + shape_str(x.shape()));
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * wd;
  Tensor<S> out({cout, h, wd});
  {
    Eigen::Map<const MatrixRM<S>> X(x.array().data(), cin, hw);
    Eigen::Map<const MatrixRM<S>> Wm(w.array().data(), cout, cin);
    Eigen::Map<MatrixRM<S>> O(out.array_mut().data(), cout, hw);
    O.noalias() = Wm * X;
    O.colwise() += b.array().matrix();
  }
  if (tape)
    detail::maybe_attach(
        tape, out, {tape->node_of(x), tape->node_of(w), tape->node_of(b)},
        [x, w, cin, cout, hw](const ArrayX<S>& g, const typename GradTape<S>::Slots& s) {
          Eigen::Map<const MatrixRM<S>> GO(g.data(), cout, hw);
          if (s[0]) {
            Eigen::Map<const MatrixRM<S>> Wm(w.array().data(), cout, cin);
            ArrayX<S> gx(static_cast<Eigen::Index>(cin) * hw);
            Eigen::Map<MatrixRM<S>>(gx.data(), cin, hw).noalias() = Wm.transpose() * GO;
            GradTape<S>::add_to(s[0], gx);
          }
          if (s[1]) {
            Eigen::Map<const MatrixRM<S>> X(x.array().data(), cin, hw);
            ArrayX<S> gw(static_cast<Eigen::Index>(cout) * cin);
            Eigen::Map<MatrixRM<S>>(gw.data(), cout, cin).noalias() = GO * X.transpose();
            GradTape<S>::add_to(s[1], gw);
          }
          if (s[2]) {
            ArrayX<S> gb(cout);
            gb.matrix() = GO.rowwise().sum();
            GradTape<S>::add_to(s[2], gb);
          }
        });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel normalization. Train mode computes statistics over (H,W) and
/// reports them through `stats_out` so the caller can update running stats;
/// infer mode normalizes with the supplied mean/var.
template <typename S>
Tensor<S> batchnorm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                    const Tensor<S>& run_mean, const Tensor<S>& run_var, S eps, BnMode mode,
                    GradTape<S>* tape = nullptr, BatchStats<S>* stats_out = nullptr) {
  if (x.rank() != 3) throw std::invalid_argument("batchnorm: expects x(C,H,W)");
  const int C = x.dim(0);
  const std::int64_t n = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  if (gamma.dim(0) != C || beta.dim(0) != C || run_mean.dim(0) != C || run_var.dim(0) != C)
    throw std::invalid_argument("batchnorm: per-channel parameter shape mismatch");
  if (!(eps > S(0))) throw std::invalid_argument("batchnorm: eps must be positive");

  ArrayX<S> m(C), v(C);
  if (mode == BnMode::Train) {
    for (int c = 0; c < C; ++c) {
      auto seg = x.array().segment(static_cast<Eigen::Index>(c) * n, n);
      m[c] = seg.sum() / S(n);
      v[c] = (seg - m[c]).square().sum() / S(n);
    }
    if (stats_out) {
      stats_out->mean = m;
      stats_out->var = v;
    }
  } else {
    m = run_mean.array();
    v = run_var.array();
    if ((v < S(0)).any()) throw std::invalid_argument("batchnorm: negative variance");
  }

  ArrayX<S> inv = (v + eps).sqrt().inverse();
  Tensor<S> xhat({C, x.dim(1), x.dim(2)});
  {
    auto& xh = xhat.array_mut();
    for (int c = 0; c < C; ++c)
      xh.segment(static_cast<Eigen::Index>(c) * n, n) =
          (x.array().segment(static_cast<Eigen::Index>(c) * n, n) - m[c]) * inv[c];
  }
  Tensor<S> out(x.shape());
  {
    auto& o = out.array_mut();
    for (int c = 0; c < C; ++c)
      o.segment(static_cast<Eigen::Index>(c) * n, n) =
          xhat.array().segment(static_cast<Eigen::Index>(c) * n, n) * gamma.array()[c] +
          beta.array()[c];
  }
  if (tape)
    detail::maybe_attach(
        tape, out, {tape->node_of(x), tape->node_of(gamma), tape->node_of(beta)},
        [xhat, gamma, inv, mode, C, n](const ArrayX<S>& g,
                                       const typename GradTape<S>::Slots& s) {
          ArrayX<S> gx, gg, gb;
          if (s[0]) gx = ArrayX<S>::Zero(static_cast<Eigen::Index>(C) * n);
          if (s[1]) gg = ArrayX<S>::Zero(C);
          if (s[2]) gb = ArrayX<S>::Zero(C);
          for (int c = 0; c < C; ++c) {
            auto gc = g.segment(static_cast<Eigen::Index>(c) * n, n);
            auto xh = xhat.array().segment(static_cast<Eigen::Index>(c) * n, n);
            if (s[1]) gg[c] = (gc * xh).sum();
            if (s[2]) gb[c] = gc.sum();
            if (s[0]) {
              ArrayX<S> gxh = gc * gamma.array()[c];
              if (mode == BnMode::Train) {
                S sum_g = gxh.sum();
                S sum_gx = (gxh * xh).sum();
                gx.segment(static_cast<Eigen::Index>(c) * n, n) =
                    inv[c] / S(n) * (S(n) * gxh - sum_g - xh * sum_gx);
              } else {
                gx.segment(static_cast<Eigen::Index>(c) * n, n) = gxh * inv[c];
              }
            }
          }
          if (s[0]) GradTape<S>::add_to(s[0], gx);
          if (s[1]) GradTape<S>::add_to(s[1], gg);
          if (s[2]) GradTape<S>::add_to(s[2], gb);
        });
  return out;
}

// ---------------------------------------------------------------------------
// Spatial resampling & channel plumbing
// ---------------------------------------------------------------------------

/// Nearest-neighbour upsampling: out[c,i,j] = in[c, i/f, j/f].
template <typename S>
Tensor<S> upsample_nn_2d(const Tensor<S>& x, int factor, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw std::invalid_argument("upsample_nn_2d: expects x(C,H,W)");
  if (factor < 1) throw std::invalid_argument("upsample_nn_2d: factor must be >= 1");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = H * factor, Wo = W * factor;
  Tensor<S> out({C, Ho, Wo});
  {
    auto& o = out.array_mut();
    const auto& xv = x.array();
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Ho; ++i) {
        const S* src = xv.data() + (static_cast<std::int64_t>(c) * H + i / factor) * W;
        S* dst = o.data() + (static_cast<std::int64_t>(c) * Ho + i) * Wo;
        for (int j = 0; j < Wo; ++j) dst[j] = src[j / factor];
      }
  }
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [C, H, W, factor](const ArrayX<S>& g,
                                           const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           const int Ho = H * factor, Wo = W * factor;
                           ArrayX<S> gx = ArrayX<S>::Zero(static_cast<Eigen::Index>(C) * H * W);
                           for (int c = 0; c < C; ++c)
                             for (int i = 0; i < Ho; ++i) {
                               const S* gr = g.data() + (static_cast<std::int64_t>(c) * Ho + i) * Wo;
                               S* dst = gx.data() + (static_cast<std::int64_t>(c) * H + i / factor) * W;
                               for (int j = 0; j < Wo; ++j) dst[j / factor] += gr[j];
                             }
                           GradTape<S>::add_to(s[0], gx);
                         });
  return out;
}

namespace detail {

/// Pairwise (balanced) summation; exact for 2^k equal addends.
template <typename S>
S pairwise_sum(S* buf, int n) {
  while (n > 1) {
    int m = n / 2;
    for (int i = 0; i < m; ++i) buf[i] = buf[2 * i] + buf[2 * i + 1];
    if (n % 2) {
      buf[m] = buf[n - 1];
      n = m + 1;
    } else {
      n = m;
    }
  }
  return buf[0];
}

}  // namespace detail

/// Factor-f average pooling (window sums are pairwise so that pooling an
/// upsampled tensor by the same power-of-two factor is exact).
template <typename S>
Tensor<S> avgpool2d(const Tensor<S>& x, int factor, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw std::invalid_argument("avgpool2d: expects x(C,H,W)");
  if (factor < 1) throw std::invalid_argument("avgpool2d: factor must be >= 1");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % factor != 0 || W % factor != 0)
    throw std::invalid_argument("avgpool2d: dimensions must be divisible by factor");
  const int Ho = H / factor, Wo = W / factor;
  const S norm = S(1) / static_cast<S>(factor * factor);
  Tensor<S> out({C, Ho, Wo});
  {
    auto& o = out.array_mut();
    const auto& xv = x.array();
    std::vector<S> buf(static_cast<std::size_t>(factor) * factor);
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          int idx = 0;
          for (int u = 0; u < factor; ++u)
            for (int v = 0; v < factor; ++v)
              buf[idx++] = xv[(static_cast<std::int64_t>(c) * H + oy * factor + u) * W +
                              ox * factor + v];
          o[(static_cast<std::int64_t>(c) * Ho + oy) * Wo + ox] =
              detail::pairwise_sum(buf.data(), factor * factor) * norm;
        }
  }
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [C, H, W, factor, norm](const ArrayX<S>& g,
                                                 const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           const int Ho = H / factor, Wo = W / factor;
                           ArrayX<S> gx(static_cast<Eigen::Index>(C) * H * W);
                           for (int c = 0; c < C; ++c)
                             for (int y = 0; y < H; ++y)
                               for (int x2 = 0; x2 < W; ++x2)
                                 gx[(static_cast<std::int64_t>(c) * H + y) * W + x2] =
                                     g[(static_cast<std::int64_t>(c) * Ho + y / factor) * Wo +
                                       x2 / factor] *
                                     norm;
                           GradTape<S>::add_to(s[0], gx);
                         });
  return out;
}

/// Channels of `a` followed by channels of `b`; spatial sizes must agree.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b, GradTape<S>* tape = nullptr) {
  if (a.rank() != 3 || b.rank() != 3)
    throw std::invalid_argument("concat_channels: expects rank-3 tensors");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw std::invalid_argument("concat_channels: spatial mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const int Ca = a.dim(0), Cb = b.dim(0), H = a.dim(1), W = a.dim(2);
  Tensor<S> out({Ca + Cb, H, W});
  {
    auto& o = out.array_mut();
    o.head(a.size()) = a.array();
    o.tail(b.size()) = b.array();
  }
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(a), tape->node_of(b)},
                         [na = a.size(), nb = b.size()](const ArrayX<S>& g,
                                                        const typename GradTape<S>::Slots& s) {
                           if (s[0]) GradTape<S>::add_to(s[0], g.head(na).eval());
                           if (s[1]) GradTape<S>::add_to(s[1], g.tail(nb).eval());
                         });
  return out;
}

/// Channels [from, from+count) of x as a new tensor.
template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, int from, int count, GradTape<S>* tape = nullptr) {
  if (x.rank() != 3) throw std::invalid_argument("slice_channels: expects rank-3 tensor");
  if (from < 0 || count <= 0 || from + count > x.dim(0))
    throw std::invalid_argument("slice_channels: range out of bounds");
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor<S> out({count, x.dim(1), x.dim(2)});
  out.array_mut() = x.array().segment(from * hw, count * hw);
  if (tape)
    detail::maybe_attach(tape, out, {tape->node_of(x)},
                         [total = x.size(), from, hw](const ArrayX<S>& g,
                                                      const typename GradTape<S>::Slots& s) {
                           if (!s[0]) return;
                           ArrayX<S> gx = ArrayX<S>::Zero(total);
                           gx.segment(from * hw, g.size()) = g;
                           GradTape<S>::add_to(s[0], gx);
                         });
  return out;
}

}  // namespace faststamp
