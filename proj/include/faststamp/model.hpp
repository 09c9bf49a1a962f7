#pragma once

#include "faststamp/ops.hpp"
#include "faststamp/rng.hpp"
#include "faststamp/tape.hpp"
#include "faststamp/tensor.hpp"

#include <cstdint>
#include <type_traits>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace faststamp {

// ---------------------------------------------------------------------------
// Secret message
// ---------------------------------------------------------------------------

/// The secret s in {0,1}^L.
struct BitMessage {
  std::vector<std::uint8_t> bits;

  BitMessage() = default;
  explicit BitMessage(std::vector<std::uint8_t> b) : bits(std::move(b)) { validate(); }

  std::size_t length() const { return bits.size(); }

  void validate() const {
    for (auto b : bits)
      if (b != 0 && b != 1) throw std::invalid_argument("BitMessage: elements must be 0 or 1");
  }

  static BitMessage random(int length, Rng& rng) {
    std::vector<std::uint8_t> b(static_cast<std::size_t>(length));
    for (auto& v : b) v = rng.bernoulli(0.5) ? 1 : 0;
    return BitMessage(std::move(b));
  }

  /// Hex string of ceil(L/4) digits, message bit 0 = MSB of the first digit.
  static BitMessage from_hex(const std::string& hex, int length) {
    const int digits = (length + 3) / 4;
    if (static_cast<int>(hex.size()) != digits)
      throw std::invalid_argument("BitMessage: expected " + std::to_string(digits) +
                                  " hex digits for " + std::to_string(length) + " bits");
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(length), 0);
    for (int d = 0; d < digits; ++d) {
      char c = hex[static_cast<std::size_t>(d)];
      int v;
      if (c >= '0' && c <= '9') v = c - '0';
      else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
      else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
      else throw std::invalid_argument("BitMessage: invalid hex digit");
      for (int k = 0; k < 4; ++k) {
        int bit_index = d * 4 + k;
        int bit = (v >> (3 - k)) & 1;
        if (bit_index < length) {
          bits[static_cast<std::size_t>(bit_index)] = static_cast<std::uint8_t>(bit);
        } else if (bit) {
          throw std::invalid_argument("BitMessage: trailing bits beyond length must be zero");
        }
      }
    }
    return BitMessage(std::move(bits));
  }

  std::string to_hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (std::size_t d = 0; d * 4 < bits.size(); ++d) {
      int v = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        v <<= 1;
        std::size_t i = d * 4 + k;
        if (i < bits.size()) v |= bits[i];
      }
      out.push_back(digits[v]);
    }
    return out;
  }

  template <typename S>
  Tensor<S> to_tensor() const {
    Tensor<S> t({static_cast<int>(bits.size())});
    auto& a = t.array_mut();
    for (std::size_t i = 0; i < bits.size(); ++i) a[static_cast<Eigen::Index>(i)] = S(bits[i]);
    return t;
  }
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture of the encoder/decoder pair. Defaults are the 128x128,
/// 128-bit configuration; tests use smaller instantiations of the same shape.
struct ModelConfig {
  int height = 128;
  int width = 128;
  int message_bits = 128;
  int secret_h = 16;
  int secret_w = 16;
  std::vector<int> enc_channels = {8, 16, 32, 64, 64};
  std::vector<int> enc_strides = {2, 2, 2, 2, 2};
  std::vector<int> enc_up_channels = {32, 16, 8, 8, 8};
  std::vector<int> dec_channels = {8, 16, 32, 64, 64, 64, 64, 64};
  std::vector<int> dec_strides = {2, 2, 2, 2, 2, 1, 1, 1};
  std::vector<int> dec_up_channels = {64, 64, 64, 32, 16, 8, 8, 8};
  int kernel = 3;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    if (height <= 0 || width <= 0 || message_bits <= 0)
      throw std::invalid_argument("config: dimensions must be positive");
    if (secret_h <= 0 || secret_w <= 0 || height % secret_h != 0 || width % secret_w != 0)
      throw std::invalid_argument("config: image size must be a multiple of the secret grid");
    auto pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
    if (!pow2(height / secret_h) || !pow2(width / secret_w))
      throw std::invalid_argument("config: secret upsample factor must be a power of two");
    if (kernel < 1 || kernel % 2 == 0)
      throw std::invalid_argument("config: kernel size must be odd");
    auto check_schedule = [](const std::vector<int>& ch, const char* what) {
      if (ch.empty()) throw std::invalid_argument(std::string("config: empty ") + what);
      bool capped = false;
      for (std::size_t i = 1; i < ch.size(); ++i) {
        if (ch[i] == ch[i - 1]) capped = true;
        else if (ch[i] == 2 * ch[i - 1] && !capped) continue;
        else
          throw std::invalid_argument(std::string("config: ") + what +
                                      " must double until a maximum then stay");
      }
    };
    check_schedule(enc_channels, "encoder channel schedule");
    check_schedule(dec_channels, "decoder channel schedule");
    if (enc_strides.size() != enc_channels.size() ||
        enc_up_channels.size() != enc_channels.size())
      throw std::invalid_argument("config: encoder schedule lengths disagree");
    if (dec_strides.size() != dec_channels.size() ||
        dec_up_channels.size() != dec_channels.size())
      throw std::invalid_argument("config: decoder schedule lengths disagree");
    for (auto& sv : {enc_strides, dec_strides})
      for (int s : sv)
        if (s != 1 && s != 2) throw std::invalid_argument("config: strides must be 1 or 2");
    auto down_ok = [](int size, const std::vector<int>& strides) {
      for (int s : strides) {
        if (s == 2 && size % 2 != 0) return false;
        size = (size + s - 1) / s;
      }
      return size >= 1;
    };
    if (!down_ok(height, enc_strides) || !down_ok(width, enc_strides) ||
        !down_ok(height, dec_strides) || !down_ok(width, dec_strides))
      throw std::invalid_argument("config: strides do not divide the image size");
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Ordered, named parameter tensors (insertion order defines checkpoint and
/// init order).
template <typename S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, Tensor<S> t, bool learnable) {
    if (index_.count(name)) throw std::invalid_argument("param store: duplicate name " + name);
    t.requires_grad = learnable;
    index_[name] = static_cast<int>(items_.size());
    items_.push_back({name, std::move(t), learnable});
    return items_.back().tensor;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("param store: unknown name " + name);
    return items_[static_cast<std::size_t>(it->second)].tensor;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("param store: unknown name " + name);
    return items_[static_cast<std::size_t>(it->second)].tensor;
  }

  struct Item {
    std::string name;
    Tensor<S> tensor;
    bool learnable;
  };

  std::vector<Item>& items() { return items_; }
  const std::vector<Item>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

 private:
  std::vector<Item> items_;
  std::unordered_map<std::string, int> index_;
};

/// All learnable weights of the encoder (alpha) and decoder (beta), plus
/// batch-norm running statistics.
template <typename S>
struct ModelParams {
  ModelConfig config;
  ParamStore<S> store;
};

struct ParamCount {
  std::vector<std::pair<std::string, std::int64_t>> per_tensor;
  std::int64_t total_learnable = 0;
  std::int64_t encoder_learnable = 0;
  std::int64_t decoder_learnable = 0;
};

template <typename S>
ParamCount param_count(const ModelParams<S>& p) {
  ParamCount c;
  for (const auto& it : p.store.items()) {
    c.per_tensor.emplace_back(it.name, it.tensor.size());
    if (!it.learnable) continue;
    c.total_learnable += it.tensor.size();
    if (it.name.rfind("enc.", 0) == 0) c.encoder_learnable += it.tensor.size();
    if (it.name.rfind("dec.", 0) == 0) c.decoder_learnable += it.tensor.size();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> uniform_init(Rng& rng, Shape shape, double bound) {
  Tensor<S> t(std::move(shape));
  auto& a = t.array_mut();
  for (Eigen::Index i = 0; i < a.size(); ++i)
    a[i] = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

/// Adds one separable conv block (depthwise + pointwise [+ batchnorm]).
template <typename S>
void add_sep_block(ParamStore<S>& st, Rng& rng, const std::string& prefix, int cin, int cout,
                   int k, bool with_bn) {
  const double bk = 1.0 / std::sqrt(static_cast<double>(k) * k);
  const double bp = 1.0 / std::sqrt(static_cast<double>(cin));
  st.add(prefix + ".dw", uniform_init<S>(rng, {cin, k, k}, bk), true);
  st.add(prefix + ".pw.w", uniform_init<S>(rng, {cout, cin}, bp), true);
  st.add(prefix + ".pw.b", uniform_init<S>(rng, {cout}, bp), true);
  if (with_bn) {
    st.add(prefix + ".bn.gamma", Tensor<S>::full({cout}, S(1)), true);
    st.add(prefix + ".bn.beta", Tensor<S>::zeros({cout}), true);
    st.add(prefix + ".bn.mean", Tensor<S>::zeros({cout}), false);
    st.add(prefix + ".bn.var", Tensor<S>::full({cout}, S(1)), false);
  }
}

}  // namespace detail

/// Deterministic parameter initialization: fan-in-scaled uniform weights,
/// batch-norm scale 1 / shift 0 / running stats (0,1).
template <typename S>
ModelParams<S> init_params(std::uint64_t seed, const ModelConfig& cfg) {
  cfg.validate();
  ModelParams<S> p;
  p.config = cfg;
  Rng rng(Rng::mix(seed, 0xfa57));
  auto& st = p.store;
  const int L = cfg.message_bits;
  const int grid = cfg.secret_h * cfg.secret_w;
  const double bl = 1.0 / std::sqrt(static_cast<double>(L));

  st.add("enc.secret.w", detail::uniform_init<S>(rng, {grid, L}, bl), true);
  st.add("enc.secret.b", detail::uniform_init<S>(rng, {grid}, bl), true);

  const int n_enc = static_cast<int>(cfg.enc_channels.size());
  int cin = 4;
  std::vector<int> enc_acts{cin};
  for (int i = 0; i < n_enc; ++i) {
    detail::add_sep_block(st, rng, "enc.down" + std::to_string(i + 1), cin,
                          cfg.enc_channels[static_cast<std::size_t>(i)], cfg.kernel, true);
    cin = cfg.enc_channels[static_cast<std::size_t>(i)];
    enc_acts.push_back(cin);
  }
  for (int i = 0; i < n_enc; ++i) {
    int skip = enc_acts[static_cast<std::size_t>(n_enc - 1 - i)];
    int cat = cin + skip;
    detail::add_sep_block(st, rng, "enc.up" + std::to_string(i + 1), cat,
                          cfg.enc_up_channels[static_cast<std::size_t>(i)], cfg.kernel, true);
    cin = cfg.enc_up_channels[static_cast<std::size_t>(i)];
  }
  detail::add_sep_block(st, rng, "enc.out", cin, 3, cfg.kernel, false);

  const int n_dec = static_cast<int>(cfg.dec_channels.size());
  cin = 3;
  std::vector<int> dec_acts{cin};
  for (int i = 0; i < n_dec; ++i) {
    detail::add_sep_block(st, rng, "dec.down" + std::to_string(i + 1), cin,
                          cfg.dec_channels[static_cast<std::size_t>(i)], cfg.kernel, true);
    cin = cfg.dec_channels[static_cast<std::size_t>(i)];
    dec_acts.push_back(cin);
  }
  for (int i = 0; i < n_dec; ++i) {
    int skip = dec_acts[static_cast<std::size_t>(n_dec - 1 - i)];
    int cat = cin + skip;
    detail::add_sep_block(st, rng, "dec.up" + std::to_string(i + 1), cat,
                          cfg.dec_up_channels[static_cast<std::size_t>(i)], cfg.kernel, true);
    cin = cfg.dec_up_channels[static_cast<std::size_t>(i)];
  }
  detail::add_sep_block(st, rng, "dec.head", cin, 1, cfg.kernel, false);
  const double bh = 1.0 / std::sqrt(static_cast<double>(grid));
  st.add("dec.msg.w", detail::uniform_init<S>(rng, {L, grid}, bh), true);
  st.add("dec.msg.b", detail::uniform_init<S>(rng, {L}, bh), true);
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename S>
using BnStatsSink = std::vector<std::pair<std::string, BatchStats<S>>>;

namespace detail {

template <typename S>
Tensor<S> sep_block(const Tensor<S>& x, const ModelParams<S>& p, const std::string& prefix,
                    int stride, BnMode mode, GradTape<S>* tape, BnStatsSink<S>* sink) {
  const auto& st = p.store;
  auto y = conv2d_depthwise(x, st.at(prefix + ".dw"), stride, (p.config.kernel - 1) / 2, tape);
  y = conv2d_pointwise(y, st.at(prefix + ".pw.w"), st.at(prefix + ".pw.b"), tape);
  BatchStats<S> stats;
  y = batchnorm(y, st.at(prefix + ".bn.gamma"), st.at(prefix + ".bn.beta"),
                st.at(prefix + ".bn.mean"), st.at(prefix + ".bn.var"),
                static_cast<S>(p.config.bn_eps), mode, tape,
                mode == BnMode::Train ? &stats : nullptr);
  if (sink && mode == BnMode::Train) sink->emplace_back(prefix, std::move(stats));
  return relu(y, tape);
}

inline void require_spatial(const char* where, const Shape& got, int c, int h, int w) {
  if (got.size() != 3 || got[0] != c || got[1] != h || got[2] != w)
    throw std::logic_error(std::string(where) + ": unexpected stage shape " + shape_str(got) +
                           ", want (" + std::to_string(c) + "," + std::to_string(h) + "," +
                           std::to_string(w) + ")");
}

/// Shared U-Net body: strided separable-conv down blocks, mirrored up blocks
/// (nearest-neighbour upsample where the mirrored block strided, then skip
/// concat, separable conv, BN, ReLU).
template <typename S>
Tensor<S> unet(const Tensor<S>& input, const ModelParams<S>& p, const std::string& net,
               const std::vector<int>& channels, const std::vector<int>& strides, BnMode mode,
               GradTape<S>* tape, BnStatsSink<S>* sink) {
  const int n = static_cast<int>(channels.size());
  std::vector<Tensor<S>> acts;
  acts.push_back(input);
  Tensor<S> u = input;
  int h = input.dim(1), w = input.dim(2);
  for (int i = 0; i < n; ++i) {
    int s = strides[static_cast<std::size_t>(i)];
    u = sep_block(u, p, net + ".down" + std::to_string(i + 1), s, mode, tape, sink);
    h = (h + s - 1) / s;
    w = (w + s - 1) / s;
    require_spatial("unet down", u.shape(), channels[static_cast<std::size_t>(i)], h, w);
    acts.push_back(u);
  }
  const auto& upch =
      net == "enc" ? p.config.enc_up_channels : p.config.dec_up_channels;
  for (int i = 0; i < n; ++i) {
    int mirrored = strides[static_cast<std::size_t>(n - 1 - i)];
    if (mirrored > 1) {
      u = upsample_nn_2d(u, mirrored, tape);
      h *= mirrored;
      w *= mirrored;
    }
    const Tensor<S>& skip = acts[static_cast<std::size_t>(n - 1 - i)];
    u = concat_channels(u, skip, tape);
    u = sep_block(u, p, net + ".up" + std::to_string(i + 1), 1, mode, tape, sink);
    require_spatial("unet up", u.shape(), upch[static_cast<std::size_t>(i)], h, w);
  }
  return u;
}

}  // namespace detail

/// Project the message to the secret grid with a linear layer, reshape, and
/// nearest-neighbour upsample to image size; used as the fourth input channel.
template <typename S>
Tensor<S> secret_upsample(const BitMessage& s, const ModelParams<S>& p,
                          std::type_identity_t<GradTape<S>*> tape = nullptr) {
  const ModelConfig& cfg = p.config;
  if (static_cast<int>(s.length()) != cfg.message_bits)
    throw std::invalid_argument("secret_upsample: message length " + std::to_string(s.length()) +
                                " does not match config L=" + std::to_string(cfg.message_bits));
  auto sv = s.to_tensor<S>();
  auto proj = linear(sv, p.store.at("enc.secret.w"), p.store.at("enc.secret.b"), tape);
  auto grid = reshape(proj, {1, cfg.secret_h, cfg.secret_w}, tape);
  return upsample_nn_2d(grid, cfg.height / cfg.secret_h, tape);
}

template <typename S>
void require_unit_range(const Tensor<S>& x, const char* who) {
  if (x.array().minCoeff() < S(0) || x.array().maxCoeff() > S(1))
    throw std::invalid_argument(std::string(who) + ": pixel values must lie in [0,1]");
}

/// x_w = E(x, s): embeds the message and returns a watermarked image in [0,1].
template <typename S>
Tensor<S> encode(const Tensor<S>& x, const BitMessage& s, const ModelParams<S>& p,
                 std::type_identity_t<GradTape<S>*> tape = nullptr, BnMode mode = BnMode::Infer,
                 std::type_identity_t<BnStatsSink<S>*> sink = nullptr) {
  const ModelConfig& cfg = p.config;
  if (x.rank() != 3 || x.dim(0) != 3 || x.dim(1) != cfg.height || x.dim(2) != cfg.width)
    throw std::invalid_argument("encode: expected image (3," + std::to_string(cfg.height) +
                                "," + std::to_string(cfg.width) + "), got " +
                                shape_str(x.shape()));
  require_unit_range(x, "encode");
  auto plane = secret_upsample(s, p, tape);
  auto d0 = concat_channels(x, plane, tape);
  auto u = detail::unet(d0, p, "enc", cfg.enc_channels, cfg.enc_strides, mode, tape, sink);
  auto y = conv2d_depthwise(u, p.store.at("enc.out.dw"), 1, (cfg.kernel - 1) / 2, tape);
  y = conv2d_pointwise(y, p.store.at("enc.out.pw.w"), p.store.at("enc.out.pw.b"), tape);
  y = tanh_act(y, tape);
  return scale(add_scalar(y, S(1), tape), S(0.5), tape);
}

/// D(y): soft message bits in [0,1], length L.
template <typename S>
Tensor<S> decode(const Tensor<S>& y, const ModelParams<S>& p,
                 std::type_identity_t<GradTape<S>*> tape = nullptr,
                 BnMode mode = BnMode::Infer,
                 std::type_identity_t<BnStatsSink<S>*> sink = nullptr) {
  const ModelConfig& cfg = p.config;
  if (y.rank() != 3 || y.dim(0) != 3 || y.dim(1) != cfg.height || y.dim(2) != cfg.width)
    throw std::invalid_argument("decode: expected image (3," + std::to_string(cfg.height) +
                                "," + std::to_string(cfg.width) + "), got " +
                                shape_str(y.shape()));
  auto u = detail::unet(y, p, "dec", cfg.dec_channels, cfg.dec_strides, mode, tape, sink);
  auto h = conv2d_depthwise(u, p.store.at("dec.head.dw"), 1, (cfg.kernel - 1) / 2, tape);
  h = conv2d_pointwise(h, p.store.at("dec.head.pw.w"), p.store.at("dec.head.pw.b"), tape);
  h = avgpool2d(h, cfg.height / cfg.secret_h, tape);
  h = reshape(h, {cfg.secret_h * cfg.secret_w}, tape);
  h = linear(h, p.store.at("dec.msg.w"), p.store.at("dec.msg.b"), tape);
  return sigmoid(h, tape);
}

/// Threshold soft bits at 0.5.
template <typename S>
BitMessage hard_bits(const Tensor<S>& soft) {
  std::vector<std::uint8_t> b(static_cast<std::size_t>(soft.size()));
  for (std::int64_t i = 0; i < soft.size(); ++i)
    b[static_cast<std::size_t>(i)] = soft.value(i) > S(0.5) ? 1 : 0;
  return BitMessage(std::move(b));
}

/// Applies collected batch statistics to the running estimates, in layer order.
template <typename S>
void update_running_stats(ModelParams<S>& p, const BnStatsSink<S>& stats) {
  const S mom = static_cast<S>(p.config.bn_momentum);
  std::map<std::string, std::pair<ArrayX<S>, int>> merged;
  for (const auto& [prefix, st] : stats) {
    auto it = merged.find(prefix);
    if (it == merged.end()) {
      ArrayX<S> mv(st.mean.size() * 2);
      mv << st.mean, st.var;
      merged.emplace(prefix, std::make_pair(std::move(mv), 1));
    } else {
      ArrayX<S> mv(st.mean.size() * 2);
      mv << st.mean, st.var;
      it->second.first += mv;
      it->second.second += 1;
    }
  }
  for (auto& [prefix, acc] : merged) {
    const Eigen::Index c = acc.first.size() / 2;
    ArrayX<S> m = acc.first.head(c) / S(acc.second);
    ArrayX<S> v = acc.first.tail(c) / S(acc.second);
    auto& rm = p.store.at(prefix + ".bn.mean");
    auto& rv = p.store.at(prefix + ".bn.var");
    rm.array_mut() = (S(1) - mom) * rm.array() + mom * m;
    rv.array_mut() = (S(1) - mom) * rv.array() + mom * v;
  }
}

}  // namespace faststamp
