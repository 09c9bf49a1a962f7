#pragma once

#include "faststamp/fixed.hpp"
#include "faststamp/image.hpp"
#include "faststamp/metrics.hpp"
#include "faststamp/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace faststamp {

/// One separable-conv block of the quantized encoder. Batch norm is kept as a
/// separate affine stage (scale/shift precomputed from the running stats),
/// not fused into the convolution.
struct QuantSepLayer {
  fixed::FixedTensor dw;
  fixed::FixedTensor pw_w;
  fixed::FixedTensor pw_b;
  fixed::FixedTensor bn_scale;
  fixed::FixedTensor bn_shift;
  bool has_bn = true;
  bool relu_after = true;
  int stride = 1;
  int cin = 0;
  int cout = 0;
};

/// Encoder weights quantized to one Q-format, plus the tanh table.
struct QuantizedEncoder {
  ModelConfig config;
  fixed::FixedSpec spec;
  fixed::TanhLut lut;
  int mac_chunk = 8;
  fixed::FixedTensor secret_w, secret_b;
  std::vector<QuantSepLayer> down, up;
  QuantSepLayer out;
};

/// Direct per-tensor rounding of the float checkpoint into the Q-format
/// (no calibration pass).
inline QuantizedEncoder quantize_encoder(const ModelParams<float>& p,
                                         const fixed::FixedSpec& spec, int lut_size = 1024,
                                         double lut_range = 4.0, int mac_chunk = 8) {
  spec.validate();
  QuantizedEncoder q;
  q.config = p.config;
  q.spec = spec;
  q.lut = fixed::build_tanh_lut(spec, lut_range, lut_size);
  q.mac_chunk = mac_chunk;
  q.secret_w = fixed::FixedTensor::from_tensor(p.store.at("enc.secret.w"), spec);
  q.secret_b = fixed::FixedTensor::from_tensor(p.store.at("enc.secret.b"), spec);

  auto make_layer = [&](const std::string& prefix, int cin, int cout, int stride,
                        bool with_bn) {
    QuantSepLayer l;
    l.dw = fixed::FixedTensor::from_tensor(p.store.at(prefix + ".dw"), spec);
    l.pw_w = fixed::FixedTensor::from_tensor(p.store.at(prefix + ".pw.w"), spec);
    l.pw_b = fixed::FixedTensor::from_tensor(p.store.at(prefix + ".pw.b"), spec);
    l.has_bn = with_bn;
    l.relu_after = with_bn;
    l.stride = stride;
    l.cin = cin;
    l.cout = cout;
    if (with_bn) {
      const auto& gamma = p.store.at(prefix + ".bn.gamma");
      const auto& beta = p.store.at(prefix + ".bn.beta");
      const auto& mean = p.store.at(prefix + ".bn.mean");
      const auto& var = p.store.at(prefix + ".bn.var");
      Tensor<float> sc({cout}), sh({cout});
      for (int c = 0; c < cout; ++c) {
        double s = gamma(c) / std::sqrt(static_cast<double>(var(c)) + p.config.bn_eps);
        sc.array_mut()[c] = static_cast<float>(s);
        sh.array_mut()[c] = static_cast<float>(beta(c) - mean(c) * s);
      }
      l.bn_scale = fixed::FixedTensor::from_tensor(sc, spec);
      l.bn_shift = fixed::FixedTensor::from_tensor(sh, spec);
    }
    return l;
  };

  const auto& cfg = p.config;
  const int n = static_cast<int>(cfg.enc_channels.size());
  int cin = 4;
  std::vector<int> acts{cin};
  for (int i = 0; i < n; ++i) {
    q.down.push_back(make_layer("enc.down" + std::to_string(i + 1), cin,
                                cfg.enc_channels[static_cast<std::size_t>(i)],
                                cfg.enc_strides[static_cast<std::size_t>(i)], true));
    cin = cfg.enc_channels[static_cast<std::size_t>(i)];
    acts.push_back(cin);
  }
  for (int i = 0; i < n; ++i) {
    int skip = acts[static_cast<std::size_t>(n - 1 - i)];
    q.up.push_back(make_layer("enc.up" + std::to_string(i + 1), cin + skip,
                              cfg.enc_up_channels[static_cast<std::size_t>(i)], 1, true));
    cin = cfg.enc_up_channels[static_cast<std::size_t>(i)];
  }
  q.out = make_layer("enc.out", cin, 3, 1, false);
  return q;
}

// ---------------------------------------------------------------------------
// Fixed-point layer primitives (shared by the batch path and the dataflow
// simulator so both produce bit-identical words)
// ---------------------------------------------------------------------------

namespace qops {

using fixed::FixedTensor;
using fixed::Word;

/// MAC inputs for one depthwise output cell, in (u,v) window order with
/// out-of-range taps skipped.
inline Word depthwise_cell(const Word* chan, int H, int W, const Word* kernel, int k, int oy,
                           int ox, int stride, int pad, const fixed::FixedSpec& spec,
                           int chunk) {
  Word vals[64];
  Word wts[64];
  int m = 0;
  for (int u = 0; u < k; ++u) {
    int iy = oy * stride - pad + u;
    if (iy < 0 || iy >= H) continue;
    for (int v = 0; v < k; ++v) {
      int ix = ox * stride - pad + v;
      if (ix < 0 || ix >= W) continue;
      vals[m] = chan[iy * W + ix];
      wts[m] = kernel[u * k + v];
      ++m;
    }
  }
  return fixed::tree_reduce_mac(vals, wts, m, spec, chunk);
}

/// One output pixel of a pointwise conv: per-channel MAC plus bias.
inline void pointwise_cell(const Word* in_vec, int cin, const FixedTensor& w,
                           const FixedTensor& b, const fixed::FixedSpec& spec, int chunk,
                           Word* out_vec) {
  const int cout = w.shape[0];
  for (int o = 0; o < cout; ++o) {
    Word acc = fixed::tree_reduce_mac(in_vec, w.raw.data() + static_cast<std::size_t>(o) * cin,
                                      cin, spec, chunk);
    out_vec[o] = fixed::fixed_add(acc, b.raw[static_cast<std::size_t>(o)], spec);
  }
}

inline Word bn_act_cell(Word v, const QuantSepLayer& l, int channel,
                        const fixed::FixedSpec& spec) {
  if (l.has_bn) {
    v = fixed::fixed_mul(v, l.bn_scale.raw[static_cast<std::size_t>(channel)], spec);
    v = fixed::fixed_add(v, l.bn_shift.raw[static_cast<std::size_t>(channel)], spec);
  }
  if (l.relu_after) v = fixed::fixed_relu(v);
  return v;
}

inline FixedTensor depthwise(const FixedTensor& x, const FixedTensor& kern, int stride, int pad,
                             const fixed::FixedSpec& spec, int chunk) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int k = kern.shape[1];
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  FixedTensor out({C, Ho, Wo}, spec);
  for (int c = 0; c < C; ++c) {
    const Word* chan = x.raw.data() + static_cast<std::size_t>(c) * H * W;
    const Word* kc = kern.raw.data() + static_cast<std::size_t>(c) * k * k;
    Word* oc = out.raw.data() + static_cast<std::size_t>(c) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        oc[oy * Wo + ox] = depthwise_cell(chan, H, W, kc, k, oy, ox, stride, pad, spec, chunk);
  }
  return out;
}

inline FixedTensor sep_layer(const FixedTensor& x, const QuantSepLayer& l, int pad,
                             const fixed::FixedSpec& spec, int chunk) {
  FixedTensor mid = depthwise(x, l.dw, l.stride, pad, spec, chunk);
  const int H = mid.shape[1], W = mid.shape[2];
  FixedTensor out({l.cout, H, W}, spec);
  std::vector<Word> in_vec(static_cast<std::size_t>(l.cin));
  std::vector<Word> out_vec(static_cast<std::size_t>(l.cout));
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  for (std::int64_t pix = 0; pix < hw; ++pix) {
    for (int c = 0; c < l.cin; ++c) in_vec[static_cast<std::size_t>(c)] = mid.raw[c * hw + pix];
    pointwise_cell(in_vec.data(), l.cin, l.pw_w, l.pw_b, spec, chunk, out_vec.data());
    for (int o = 0; o < l.cout; ++o)
      out.raw[o * hw + pix] = bn_act_cell(out_vec[static_cast<std::size_t>(o)], l, o, spec);
  }
  return out;
}

inline FixedTensor upsample2(const FixedTensor& x, int factor) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  FixedTensor out({C, H * factor, W * factor}, x.spec);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H * factor; ++y)
      for (int xx = 0; xx < W * factor; ++xx)
        out.raw[(static_cast<std::size_t>(c) * H * factor + y) * W * factor + xx] =
            x.raw[(static_cast<std::size_t>(c) * H + y / factor) * W + xx / factor];
  return out;
}

inline FixedTensor concat(const FixedTensor& a, const FixedTensor& b) {
  FixedTensor out({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]}, a.spec);
  std::copy(a.raw.begin(), a.raw.end(), out.raw.begin());
  std::copy(b.raw.begin(), b.raw.end(), out.raw.begin() + a.size());
  return out;
}

}  // namespace qops

/// Runs the encoder entirely in fixed point and re-expands to 8-bit RGB.
/// Pure and deterministic: fixed inputs give bit-identical output bytes.
inline ImageU8 fixed_encoder_forward(const QuantizedEncoder& q, const ImageU8& img,
                                     const BitMessage& msg) {
  const ModelConfig& cfg = q.config;
  if (img.height != cfg.height || img.width != cfg.width || !img.valid())
    throw std::invalid_argument("fixed_encoder_forward: image does not match the model size");
  if (static_cast<int>(msg.length()) != cfg.message_bits)
    throw std::invalid_argument("fixed_encoder_forward: message length mismatch");
  const fixed::FixedSpec& spec = q.spec;
  const int H = cfg.height, W = cfg.width;
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  const int pad = (cfg.kernel - 1) / 2;

  // quantize inputs
  fixed::FixedTensor x({4, H, W}, spec);
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      x.raw[c * hw + i] =
          fixed::quantize(img.data[static_cast<std::size_t>(i * 3 + c)] / 255.0, spec);

  // secret upsampler: linear + reshape + nearest-neighbour upsample
  {
    const int L = cfg.message_bits;
    std::vector<fixed::Word> bits(static_cast<std::size_t>(L));
    for (int j = 0; j < L; ++j)
      bits[static_cast<std::size_t>(j)] = fixed::quantize(msg.bits[static_cast<std::size_t>(j)], spec);
    const int f = H / cfg.secret_h;
    for (int gy = 0; gy < cfg.secret_h; ++gy)
      for (int gx = 0; gx < cfg.secret_w; ++gx) {
        int gi = gy * cfg.secret_w + gx;
        fixed::Word acc = fixed::tree_reduce_mac(
            bits.data(), q.secret_w.raw.data() + static_cast<std::size_t>(gi) * L, L, spec,
            q.mac_chunk);
        acc = fixed::fixed_add(acc, q.secret_b.raw[static_cast<std::size_t>(gi)], spec);
        for (int yy = gy * f; yy < (gy + 1) * f; ++yy)
          for (int xx = gx * f; xx < (gx + 1) * f; ++xx)
            x.raw[static_cast<std::size_t>(3) * hw + yy * static_cast<std::int64_t>(W) + xx] = acc;
      }
  }

  // U-Net
  std::vector<fixed::FixedTensor> acts{x};
  fixed::FixedTensor u = x;
  const int n = static_cast<int>(q.down.size());
  for (int i = 0; i < n; ++i) {
    u = qops::sep_layer(u, q.down[static_cast<std::size_t>(i)], pad, spec, q.mac_chunk);
    acts.push_back(u);
  }
  for (int i = 0; i < n; ++i) {
    int mirrored = q.down[static_cast<std::size_t>(n - 1 - i)].stride;
    if (mirrored > 1) u = qops::upsample2(u, mirrored);
    u = qops::concat(u, acts[static_cast<std::size_t>(n - 1 - i)]);
    u = qops::sep_layer(u, q.up[static_cast<std::size_t>(i)], pad, spec, q.mac_chunk);
  }
  u = qops::sep_layer(u, q.out, pad, spec, q.mac_chunk);

  // tanh via LUT, then (y+1)/2
  const fixed::Word one = fixed::quantize(1.0, spec);
  const fixed::Word half = fixed::quantize(0.5, spec);
  ImageU8 out;
  out.height = H;
  out.width = W;
  out.data.resize(static_cast<std::size_t>(hw) * 3);
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) {
      fixed::Word y = q.lut.lookup(u.raw[c * hw + i]);
      y = fixed::fixed_mul(fixed::fixed_add(y, one, spec), half, spec);
      double v = std::clamp(fixed::dequantize(y, spec), 0.0, 1.0);
      out.data[static_cast<std::size_t>(i * 3 + c)] =
          static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Bit-width design-space sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  fixed::FixedSpec spec;
  double bra_pct = 0;
  double psnr_db = 0;
  double ssim_val = 0;

  nlohmann::json to_json() const {
    return {{"spec", spec.name()},
            {"total_bits", spec.total_bits()},
            {"bra", bra_pct},
            {"psnr", psnr_capped(psnr_db)},
            {"ssim", ssim_val}};
  }
};

/// Evaluates the quantized encoder (with the float decoder) for each spec.
inline std::vector<SweepRow> bitwidth_sweep(const ModelParams<float>& params,
                                            const std::vector<Tensor<float>>& images,
                                            const std::vector<BitMessage>& messages,
                                            const std::vector<fixed::FixedSpec>& specs,
                                            int lut_size = 1024, double lut_range = 4.0,
                                            int mac_chunk = 8) {
  if (images.empty() || images.size() != messages.size())
    throw std::invalid_argument("bitwidth_sweep: need a non-empty evaluation set");
  std::vector<SweepRow> rows;
  for (const auto& spec : specs) {
    QuantizedEncoder q = quantize_encoder(params, spec, lut_size, lut_range, mac_chunk);
    SweepRow row;
    row.spec = spec;
    for (std::size_t i = 0; i < images.size(); ++i) {
      ImageU8 in = tensor_to_image(images[i]);
      ImageU8 wm = fixed_encoder_forward(q, in, messages[i]);
      Tensor<float> y = image_to_tensor<float>(wm);
      row.bra_pct += bra(messages[i], decode(y, params));
      row.psnr_db += psnr_capped(psnr(images[i], y));
      row.ssim_val += ssim(images[i], y);
    }
    row.bra_pct /= static_cast<double>(images.size());
    row.psnr_db /= static_cast<double>(images.size());
    row.ssim_val /= static_cast<double>(images.size());
    rows.push_back(row);
  }
  return rows;
}

}  // namespace faststamp
