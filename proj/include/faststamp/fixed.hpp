#pragma once

#include "faststamp/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace faststamp {
namespace fixed {

using Word = std::int32_t;
using Wide = std::int64_t;
using Acc = __int128;  // MAC accumulator; wide enough that summation order never matters

enum class RoundMode { HalfAway, TowardZero };
enum class OverflowMode { Saturate, Wrap };

/// Signed Q-format: int_bits includes the sign bit, total = int + frac.
struct FixedSpec {
  int int_bits = 6;
  int frac_bits = 10;
  RoundMode rounding = RoundMode::HalfAway;
  OverflowMode overflow = OverflowMode::Saturate;

  int total_bits() const { return int_bits + frac_bits; }

  void validate() const {
    if (int_bits < 1 || frac_bits < 0)
      throw std::invalid_argument("fixed: need at least a sign bit and non-negative fraction");
    if (total_bits() < 8 || total_bits() > 32)
      throw std::invalid_argument("fixed: total bits must lie in [8,32]");
  }

  Wide raw_min() const { return -(Wide(1) << (total_bits() - 1)); }
  Wide raw_max() const { return (Wide(1) << (total_bits() - 1)) - 1; }
  double resolution() const { return std::ldexp(1.0, -frac_bits); }

  std::string name() const {
    return "Q" + std::to_string(int_bits) + "." + std::to_string(frac_bits);
  }

  /// Parses "Q<int>.<frac>".
  static FixedSpec parse(const std::string& s) {
    if (s.size() < 4 || (s[0] != 'Q' && s[0] != 'q'))
      throw std::invalid_argument("fixed: spec must look like Q6.10");
    auto dot = s.find('.');
    if (dot == std::string::npos)
      throw std::invalid_argument("fixed: spec must look like Q6.10");
    FixedSpec spec;
    try {
      spec.int_bits = std::stoi(s.substr(1, dot - 1));
      spec.frac_bits = std::stoi(s.substr(dot + 1));
    } catch (const std::exception&) {
      throw std::invalid_argument("fixed: cannot parse spec " + s);
    }
    spec.validate();
    return spec;
  }

  bool operator==(const FixedSpec&) const = default;
};

inline Word saturate(Acc v, const FixedSpec& spec) {
  if (spec.overflow == OverflowMode::Wrap) {
    const int t = spec.total_bits();
    auto u = static_cast<std::uint64_t>(v) & ((t == 64 ? ~0ULL : (1ULL << t) - 1));
    Wide w = static_cast<Wide>(u);
    if (w > spec.raw_max()) w -= Wide(1) << t;
    return static_cast<Word>(w);
  }
  if (v > Acc(spec.raw_max())) return static_cast<Word>(spec.raw_max());
  if (v < Acc(spec.raw_min())) return static_cast<Word>(spec.raw_min());
  return static_cast<Word>(v);
}

/// Shift right by `shift` with the spec's rounding, then saturate.
inline Word shift_round_saturate(Acc acc, int shift, const FixedSpec& spec) {
  if (shift > 0) {
    bool neg = acc < 0;
    Acc mag = neg ? -acc : acc;
    if (spec.rounding == RoundMode::HalfAway) mag += Acc(1) << (shift - 1);
    mag >>= shift;
    acc = neg ? -mag : mag;
  }
  return saturate(acc, spec);
}

inline Word quantize(double v, const FixedSpec& spec) {
  const double scaled = std::ldexp(v, spec.frac_bits);
  const double lo = static_cast<double>(spec.raw_min());
  const double hi = static_cast<double>(spec.raw_max());
  if (std::isnan(scaled)) return 0;
  if (scaled >= hi) return static_cast<Word>(spec.raw_max());
  if (scaled <= lo) return static_cast<Word>(spec.raw_min());
  double r = spec.rounding == RoundMode::HalfAway ? std::round(scaled) : std::trunc(scaled);
  return saturate(static_cast<Acc>(static_cast<Wide>(r)), spec);
}

inline double dequantize(Word raw, const FixedSpec& spec) {
  return std::ldexp(static_cast<double>(raw), -spec.frac_bits);
}

inline Word fixed_add(Word a, Word b, const FixedSpec& spec) {
  return saturate(Acc(Wide(a) + Wide(b)), spec);
}

inline Word fixed_mul(Word a, Word b, const FixedSpec& spec) {
  return shift_round_saturate(Acc(Wide(a) * Wide(b)), spec.frac_bits, spec);
}

inline Word fixed_relu(Word a) { return a > 0 ? a : 0; }

/// Quantized tensor: raw words plus the Q-format they encode.
struct FixedTensor {
  Shape shape;
  std::vector<Word> raw;
  FixedSpec spec;

  FixedTensor() = default;
  FixedTensor(Shape s, FixedSpec sp)
      : shape(std::move(s)), raw(static_cast<std::size_t>(shape_size(shape)), 0), spec(sp) {}

  std::int64_t size() const { return static_cast<std::int64_t>(raw.size()); }

  template <typename S>
  static FixedTensor from_tensor(const Tensor<S>& t, const FixedSpec& spec) {
    FixedTensor f(t.shape(), spec);
    for (std::int64_t i = 0; i < t.size(); ++i)
      f.raw[static_cast<std::size_t>(i)] = quantize(static_cast<double>(t.value(i)), spec);
    return f;
  }

  template <typename S>
  Tensor<S> to_tensor() const {
    Tensor<S> t(shape);
    auto& a = t.array_mut();
    for (std::size_t i = 0; i < raw.size(); ++i)
      a[static_cast<Eigen::Index>(i)] = static_cast<S>(dequantize(raw[i], spec));
    return t;
  }
};

/// Chunked product-and-sum tree: MACs accumulate exactly in a wide register,
/// chunk partials reduce pairwise, and the result is requantized once. The
/// accumulator is wide enough that chunking and tree order cannot change the
/// result; saturation happens only at the final requantization.
inline Word tree_reduce_mac(const Word* inputs, const Word* weights, std::int64_t n,
                            const FixedSpec& spec, int chunk) {
  if (chunk < 1) throw std::invalid_argument("tree_reduce_mac: chunk must be >= 1");
  std::vector<Acc> partials;
  partials.reserve(static_cast<std::size_t>((n + chunk - 1) / chunk));
  for (std::int64_t base = 0; base < n; base += chunk) {
    Acc acc = 0;
    const std::int64_t end = std::min<std::int64_t>(n, base + chunk);
    for (std::int64_t i = base; i < end; ++i) acc += Acc(Wide(inputs[i]) * Wide(weights[i]));
    partials.push_back(acc);
  }
  if (partials.empty()) partials.push_back(0);
  while (partials.size() > 1) {
    std::size_t m = 0;
    for (std::size_t i = 0; i + 1 < partials.size(); i += 2)
      partials[m++] = partials[i] + partials[i + 1];
    if (partials.size() % 2) partials[m++] = partials.back();
    partials.resize(m);
  }
  return shift_round_saturate(partials[0], spec.frac_bits, spec);
}

inline Word tree_reduce_mac(const FixedTensor& inputs, const FixedTensor& weights,
                            const FixedSpec& spec, int chunk) {
  if (inputs.size() != weights.size())
    throw std::invalid_argument("tree_reduce_mac: length mismatch");
  return tree_reduce_mac(inputs.raw.data(), weights.raw.data(), inputs.size(), spec, chunk);
}

// ---------------------------------------------------------------------------
// tanh lookup table
// ---------------------------------------------------------------------------

/// Uniform tanh table over [-range, range]. Lookups round the input to the
/// nearest grid point with ties toward zero; each entry minimizes the
/// worst-case error over the representable inputs it serves, keeping the
/// table odd and monotone. Inputs beyond the range map to +-tanh(range).
struct TanhLut {
  FixedSpec spec;
  double range = 4.0;
  int size = 1024;
  std::vector<Word> table;  // index k+size/2 holds grid point k
  Word sat_pos = 0;         // quantize(tanh(range))

  Word lookup(Word x_raw) const {
    const double step = 2.0 * range / size;
    const double idx = dequantize(x_raw, spec) / step;
    double f = std::floor(idx);
    double r = idx - f;
    long k = static_cast<long>(f);
    if (r > 0.5 || (r == 0.5 && idx < 0)) k += 1;
    const long half = size / 2;
    if (k > half - 1) return sat_pos;
    if (k < -half) return static_cast<Word>(-sat_pos);
    return table[static_cast<std::size_t>(k + half)];
  }
};

inline TanhLut build_tanh_lut(const FixedSpec& spec, double range = 4.0, int size = 1024) {
  if (size < 2 || size % 2 != 0)
    throw std::invalid_argument("tanh lut: size must be even and >= 2");
  if (!(range > 0)) throw std::invalid_argument("tanh lut: range must be positive");
  TanhLut lut;
  lut.spec = spec;
  lut.range = range;
  lut.size = size;
  lut.table.assign(static_cast<std::size_t>(size), 0);
  lut.sat_pos = quantize(std::tanh(range), spec);

  const double step = 2.0 * range / size;
  const double ulp = spec.resolution();
  const int half = size / 2;
  for (int k = 0; k < half; ++k) {
    Word entry;
    if (k == 0) {
      entry = 0;
    } else {
      // representable inputs assigned to grid point k (ties go toward zero)
      const double lo_bound = (k - 0.5) * step;
      const double hi_bound = (k + 0.5) * step;
      double lo = std::floor(lo_bound / ulp + 1.0) * ulp;  // first raw strictly above lo_bound
      if (lo <= lo_bound) lo = lo_bound + ulp;
      double hi = std::floor(hi_bound / ulp) * ulp;  // ties at hi_bound included
      if (hi < lo) hi = lo;
      const double tl = std::tanh(lo), th = std::tanh(hi);
      const double mid = 0.5 * (tl + th) * std::ldexp(1.0, spec.frac_bits);
      Word cand[2] = {saturate(static_cast<Acc>(std::floor(mid)), spec),
                      saturate(static_cast<Acc>(std::ceil(mid)), spec)};
      auto cell_err = [&](Word q) {
        double dq = dequantize(q, spec);
        return std::max(std::abs(dq - tl), std::abs(dq - th));
      };
      entry = cell_err(cand[0]) <= cell_err(cand[1]) ? cand[0] : cand[1];
    }
    lut.table[static_cast<std::size_t>(half + k)] = entry;
    lut.table[static_cast<std::size_t>(half - k)] = static_cast<Word>(-entry);
  }
  // index 0 (grid point -half) pairs with the saturation value on the + side
  lut.table[0] = static_cast<Word>(-lut.sat_pos);
  return lut;
}

}  // namespace fixed
}  // namespace faststamp
