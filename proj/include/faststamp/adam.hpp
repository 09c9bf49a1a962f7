#pragma once

#include "faststamp/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace faststamp {

template <typename S>
struct AdamConfig {
  S lr = S(1.5e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
};

/// Per-parameter moment accumulators; shapes match the parameter.
template <typename S>
struct AdamState {
  ArrayX<S> m;
  ArrayX<S> v;
  long step = 0;

  void init(std::int64_t n) {
    m = ArrayX<S>::Zero(n);
    v = ArrayX<S>::Zero(n);
    step = 0;
  }
};

/// One bias-corrected Adam update, in place.
template <typename S>
void adam_step(Tensor<S>& param, const ArrayX<S>& grad, AdamState<S>& st,
               const AdamConfig<S>& cfg) {
  if (grad.size() != param.size())
    throw std::invalid_argument("adam_step: gradient/parameter shape mismatch");
  if (st.m.size() == 0) st.init(param.size());
  if (st.m.size() != param.size())
    throw std::invalid_argument("adam_step: state/parameter shape mismatch");
  st.step += 1;
  st.m = cfg.beta1 * st.m + (S(1) - cfg.beta1) * grad;
  st.v = cfg.beta2 * st.v + (S(1) - cfg.beta2) * grad.square();
  const S bc1 = S(1) - std::pow(cfg.beta1, static_cast<S>(st.step));
  const S bc2 = S(1) - std::pow(cfg.beta2, static_cast<S>(st.step));
  param.array_mut() -= cfg.lr * (st.m / bc1) / ((st.v / bc2).sqrt() + cfg.eps);
}

}  // namespace faststamp
