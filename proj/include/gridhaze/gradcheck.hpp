#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gridhaze/ops.hpp"
#include "gridhaze/rng.hpp"
#include "gridhaze/tape.hpp"
#include "gridhaze/tensor.hpp"

namespace gridhaze {

// Central finite differences in double precision against the analytic
// backward pass. The loss functor must rebuild its graph from the current
// tensor values on every call.
//
// rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|), i.e. an
// absolute tolerance for small gradients and a relative one for large.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
  std::string worst;  // "tensor#k[i]" of the worst coordinate
};

using DoubleLossFn = std::function<Tensor<double>(Tape<double>&)>;

inline GradCheckReport finite_difference_check(const DoubleLossFn& loss_fn,
                                               const std::vector<Tensor<double>>& wrt,
                                               double eps = 1e-4) {
  // Analytic pass.
  for (const auto& t : wrt) require(t.tracked(), "finite_difference_check: wrt tensor untracked");
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = loss_fn(tape);
    tape.backward(loss);
    for (const auto& t : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());
    for (auto& t : wrt) const_cast<Tensor<double>&>(t).zero_grad();
  }

  auto eval = [&loss_fn]() {
    Tape<double> tape;
    tape.set_recording(false);
    return loss_fn(tape).item();
  };

  GradCheckReport rep;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto data = const_cast<Tensor<double>&>(wrt[k]).data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double f_plus = eval();
      data[i] = saved - eps;
      const double f_minus = eval();
      data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "tensor#" + std::to_string(k) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

// Random tensor in [-1, 1], optionally keeping every value at least `margin`
// away from the kink locations of piecewise ops so central differences stay
// second-order accurate.
inline Tensor<double> random_tensor(const Shape& s, Rng& rng, bool tracked,
                                    const std::vector<double>& kinks = {},
                                    double margin = 0.0) {
  std::vector<double> vals(static_cast<std::size_t>(s.numel()));
  for (auto& v : vals) {
    for (;;) {
      const double cand = rng.uniform(-1.0, 1.0);
      bool ok = true;
      for (double kink : kinks)
        if (std::abs(cand - kink) < margin) ok = false;
      if (ok) {
        v = cand;
        break;
      }
    }
  }
  return Tensor<double>::from_data(s, std::move(vals), tracked);
}

// Scalar probe of a tensor-valued function: mean of an elementwise product
// with fixed random weights, so every output coordinate influences the loss
// with a distinct coefficient.
inline Tensor<double> weighted_probe(Tape<double>& tape, const Tensor<double>& y,
                                     std::uint64_t salt = 0x5eedf00d) {
  Rng rng(mix_seed(salt, static_cast<std::uint64_t>(y.size())));
  std::vector<double> w(static_cast<std::size_t>(y.size()));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  Tensor<double> probe = Tensor<double>::from_data(y.shape(), std::move(w));
  return mean_all(tape, mul(tape, y, probe));
}

}  // namespace gridhaze
