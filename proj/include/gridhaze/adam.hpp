#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gridhaze/tensor.hpp"

namespace gridhaze {

// Bias-corrected Adam. Moment buffers are laid out by parameter index and are
// zero-initialized; t counts completed steps.
template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  template <typename Params>
  static AdamState init(const Params& params, double beta1 = 0.9, double beta2 = 0.999,
                        double epsilon = 1e-8) {
    AdamState s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.epsilon = epsilon;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), T(0));
      s.v.emplace_back(p.size(), T(0));
    }
    return s;
  }
};

// One optimizer step over an ordered parameter list. Grads are read from each
// tensor's grad buffer. Any non-finite gradient aborts before touching state.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr) {
  require(params.size() == state.m.size() && params.size() == state.v.size(),
          "adam_step: state holds " + std::to_string(state.m.size()) +
              " moment buffers for " + std::to_string(params.size()) + " parameters");
  for (std::size_t p = 0; p < params.size(); ++p) {
    require(params[p].tracked(), "adam_step: parameter " + std::to_string(p) + " is untracked");
    require(params[p].size() == static_cast<std::int64_t>(state.m[p].size()),
            "adam_step: moment buffer " + std::to_string(p) + " has wrong size");
    for (T g : params[p].grad())
      if (!std::isfinite(static_cast<double>(g)))
        fail("adam_step: non-finite gradient in parameter " + std::to_string(p) +
             "; step aborted");
  }
  state.t += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].data();
    auto grad = params[p].grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      data[i] = static_cast<T>(static_cast<double>(data[i]) -
                               lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

}  // namespace gridhaze
