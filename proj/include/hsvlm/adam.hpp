#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "hsvlm/error.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

/// Adam moments for an ordered parameter list. No weight decay.
template <class T>
struct AdamState {
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;

  explicit AdamState(std::span<BasicTensor<T>* const> params) {
    for (const auto* p : params) {
      m.emplace_back(p->shape());
      v.emplace_back(p->shape());
    }
  }
};

/// One bias-corrected Adam update, in place. Moments and the update are
/// computed in binary64.
template <class T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads, AdamState<T>& state,
               double lr) {
  if (!(lr > 0)) fail(ErrorCode::InvalidConfig, "learning rate must be positive");
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    fail(ErrorCode::ShapeMismatch, "adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->shape() != grads[k].shape() || params[k]->shape() != state.m[k].shape() ||
        params[k]->shape() != state.v[k].shape()) {
      fail(ErrorCode::ShapeMismatch, "adam_step: shape mismatch for parameter " + std::to_string(k));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.epsilon);
      if (update != 0.0) p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
    }
  }
}

}  // namespace hsvlm
