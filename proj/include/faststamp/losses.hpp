#pragma once

#include "faststamp/model.hpp"
#include "faststamp/ops.hpp"
#include "faststamp/transforms.hpp"

#include <functional>
#include <stdexcept>
#include <vector>

namespace faststamp {

/// Loss coefficients. The perceptual term is a pluggable hook that
/// contributes zero unless registered.
template <typename S>
struct LossWeights {
  S c_p = S(0);
  S c_m = S(2);
  S image_weight_start = S(0);
  S image_weight_end = S(1);
  long image_ramp_iters = 0;
  S malicious_clamp = S(0.5);
  std::function<Tensor<S>(const Tensor<S>& x, const Tensor<S>& xw, GradTape<S>* tape)>
      perceptual_hook;

  void validate() const {
    if (c_p < S(0) || c_m < S(0)) throw std::invalid_argument("loss: coefficients must be >= 0");
    if (image_weight_end < image_weight_start)
      throw std::invalid_argument("loss: image weight ramp must be non-decreasing");
    if (malicious_clamp < S(0))
      throw std::invalid_argument("loss: malicious clamp must be >= 0");
  }

  S image_weight(long iter) const {
    if (image_ramp_iters <= 0 || iter >= image_ramp_iters) return image_weight_end;
    return image_weight_start + (image_weight_end - image_weight_start) *
                                    static_cast<S>(iter) / static_cast<S>(image_ramp_iters);
  }
};

/// L1 + L2 [+ c_p * perceptual hook] between the cover and watermarked image.
template <typename S>
Tensor<S> loss_image(const Tensor<S>& x, const Tensor<S>& xw, const LossWeights<S>& w,
                     std::type_identity_t<GradTape<S>*> tape = nullptr, S* l1_out = nullptr,
                     S* l2_out = nullptr) {
  require_same_shape(x, xw, "loss_image");
  auto d = sub(xw, x, tape);
  auto l1 = mean(abs_val(d, tape), tape);
  auto l2 = mean(mul(d, d, tape), tape);
  if (l1_out) *l1_out = l1.value(0);
  if (l2_out) *l2_out = l2.value(0);
  auto total = add(l1, l2, tape);
  if (w.c_p > S(0) && w.perceptual_hook)
    total = add(total, scale(w.perceptual_hook(x, xw, tape), w.c_p, tape), tape);
  return total;
}

/// L1 distance between the true bits and the decoded soft bits.
template <typename S>
Tensor<S> loss_message_robust(const Tensor<S>& s_true, const Tensor<S>& s_soft,
                              std::type_identity_t<GradTape<S>*> tape = nullptr) {
  require_same_shape(s_true, s_soft, "loss_message_robust");
  return mean(abs_val(sub(s_soft, s_true, tape), tape), tape);
}

/// Benign retrieval error minus the (clamped) malicious retrieval error:
/// beyond the clamp, raising the malicious error no longer lowers the loss.
template <typename S>
Tensor<S> loss_message_semifragile(const Tensor<S>& s_true, const Tensor<S>& s_b_soft,
                                   const Tensor<S>& s_m_soft, S m_clamp,
                                   std::type_identity_t<GradTape<S>*> tape = nullptr) {
  require_same_shape(s_true, s_b_soft, "loss_message_semifragile");
  require_same_shape(s_true, s_m_soft, "loss_message_semifragile");
  auto lb = loss_message_robust(s_true, s_b_soft, tape);
  auto lm = loss_message_robust(s_true, s_m_soft, tape);
  return sub(lb, min_scalar(lm, m_clamp, tape), tape);
}

enum class TrainMode { Robust, SemiFragile };

struct LossDiagnostics {
  double l1_img = 0;
  double l2_img = 0;
  double l_msg = 0;
  double total = 0;
  double bra_benign = 0;
  double bra_malicious = 0;
  bool has_malicious = false;
};

/// Full training objective for one mini-batch: encode, apply sampled benign
/// (and, in semi-fragile mode, malicious) transforms, decode, and combine the
/// ramped image loss with the message loss; the expectation is the batch mean.
template <typename S>
struct TotalLossResult {
  Tensor<S> loss;
  LossDiagnostics diag;
};

template <typename S>
TotalLossResult<S> total_loss(const std::vector<Tensor<S>>& batch,
                              const std::vector<BitMessage>& messages,
                              const ModelParams<S>& params, TrainMode mode,
                              const TransformDist& benign, const TransformDist& malicious,
                              const LossWeights<S>& weights, long iter, Rng& rng,
                              std::type_identity_t<GradTape<S>*> tape = nullptr,
                              BnMode bn_mode = BnMode::Train,
                              std::type_identity_t<BnStatsSink<S>*> sink = nullptr) {
  if (batch.empty() || batch.size() != messages.size())
    throw std::invalid_argument("total_loss: batch and message counts disagree");
  weights.validate();
  const S img_w = weights.image_weight(iter);
  const int B = static_cast<int>(batch.size());
  const int H = params.config.height, W = params.config.width;

  Tensor<S> acc;
  LossDiagnostics diag;
  diag.has_malicious = mode == TrainMode::SemiFragile;
  for (int i = 0; i < B; ++i) {
    const Tensor<S>& x = batch[static_cast<std::size_t>(i)];
    const BitMessage& msg = messages[static_cast<std::size_t>(i)];
    auto s_true = msg.to_tensor<S>();

    auto xw = encode(x, msg, params, tape, bn_mode, sink);
    auto gb = sample_transform(benign, H, W, rng);
    auto xb = apply_transform(gb, xw, tape);
    auto sb = decode(xb, params, tape, bn_mode, sink);

    S l1 = 0, l2 = 0;
    auto li = loss_image(x, xw, weights, tape, &l1, &l2);

    Tensor<S> lm;
    if (mode == TrainMode::SemiFragile) {
      auto gm = sample_transform(malicious, H, W, rng);
      const Tensor<S>& patch = batch[static_cast<std::size_t>((i + 1) % B)];
      auto xm = apply_transform(gm, xw, tape, &patch);
      auto sm = decode(xm, params, tape, bn_mode, sink);
      lm = loss_message_semifragile(s_true, sb, sm, weights.malicious_clamp, tape);
      diag.bra_malicious += bra(msg, sm);
    } else {
      lm = loss_message_robust(s_true, sb, tape);
    }
    auto item = add(scale(li, img_w, tape), scale(lm, weights.c_m, tape), tape);
    acc = acc.defined() ? add(acc, item, tape) : item;

    diag.l1_img += static_cast<double>(l1);
    diag.l2_img += static_cast<double>(l2);
    diag.l_msg += static_cast<double>(lm.value(0));
    diag.bra_benign += bra(msg, sb);
  }
  auto loss = scale(acc, S(1) / static_cast<S>(B), tape);
  diag.l1_img /= B;
  diag.l2_img /= B;
  diag.l_msg /= B;
  diag.bra_benign /= B;
  diag.bra_malicious /= B;
  diag.total = static_cast<double>(loss.value(0));
  return {loss, diag};
}

}  // namespace faststamp
