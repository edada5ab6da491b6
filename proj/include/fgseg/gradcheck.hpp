#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "fgseg/tensor.hpp"

namespace fgseg {

inline constexpr double kGradCheckPerturbation = 1e-6;

// max(|a-n| / max(|a|, |n|, 1e-8))
inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Central-difference check of every coordinate of `t` against the
// analytic gradient. `loss` recomputes the scalar loss from the current
// tensor contents; `skip` can exclude coordinates (e.g. near a ReLU kink).
template <typename LossFn>
double fd_check_coords(LossFn&& loss, Tensor<double>& t, const Tensor<double>& analytic,
                       double h = kGradCheckPerturbation,
                       const std::function<bool(std::int64_t)>& skip = {}) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < t.size(); ++i) {
    if (skip && skip(i)) continue;
    const double saved = t[i];
    t[i] = saved + h;
    const double up = loss();
    t[i] = saved - h;
    const double down = loss();
    t[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, grad_rel_err(analytic[i], numeric));
  }
  return worst;
}

// Directional (Jacobian-vector-product) check across several tensors at
// once: perturbs all of them along one random +-1 direction and compares
// the finite-difference slope with <grad, direction>.
template <typename LossFn>
double fd_check_direction(LossFn&& loss,
                          const std::vector<std::pair<Tensor<double>*, const Tensor<double>*>>&
                              tensors_and_grads,
                          Rng& rng, double h = kGradCheckPerturbation) {
  std::vector<std::vector<double>> dirs;
  dirs.reserve(tensors_and_grads.size());
  double analytic = 0.0;
  for (const auto& [t, g] : tensors_and_grads) {
    std::vector<double> d(static_cast<std::size_t>(t->size()));
    for (std::int64_t i = 0; i < t->size(); ++i) {
      d[static_cast<std::size_t>(i)] = rng.next_u64() & 1 ? 1.0 : -1.0;
      analytic += (*g)[i] * d[static_cast<std::size_t>(i)];
    }
    dirs.push_back(std::move(d));
  }
  auto shift = [&](double sign) {
    for (std::size_t k = 0; k < tensors_and_grads.size(); ++k) {
      Tensor<double>* t = tensors_and_grads[k].first;
      for (std::int64_t i = 0; i < t->size(); ++i) {
        (*t)[i] += sign * h * dirs[k][static_cast<std::size_t>(i)];
      }
    }
  };
  shift(+1.0);
  const double up = loss();
  shift(-2.0);
  const double down = loss();
  shift(+1.0);
  const double numeric = (up - down) / (2.0 * h);
  return grad_rel_err(analytic, numeric);
}

}  // namespace fgseg
