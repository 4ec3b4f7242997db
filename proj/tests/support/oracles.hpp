#pragma once

// Hand-built noise predictors with known answers, for testing the classifier
// and the noise optimizer without a trained network.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "noop/diffusion/schedule.hpp"

namespace noop::testing {

/// eps_hat_c = (x_t - sqrt(abar) m_c) / sqrt(1 - abar) for a fixed prototype
/// image m_c per class. Then eps_hat_c - eps = sqrt(abar / (1 - abar)) (x0 - m_c),
/// so the decision is nearest-prototype and does not depend on the noise.
/// Differentiable in x_t. All rows must share one timestep.
template <typename T>
struct PrototypeOracle {
  diffusion::NoiseSchedule sched;
  nd::Tensor<T> prototypes;  // [K, C, H, W]

  std::size_t num_classes() const { return prototypes.dim(0); }

  nd::Tensor<T> predict(nd::Graph<T>& g, const nd::Tensor<T>& x_t, std::span<const std::size_t> classes,
                        std::span<const std::size_t> ts) const {
    const std::size_t n = x_t.dim(0), len = x_t.size() / n;
    if (classes.size() != n || ts.size() != n) throw nd::ShapeError("oracle: one class and timestep per row");
    for (auto t : ts)
      if (t != ts[0]) throw std::invalid_argument("oracle: mixed timesteps");
    const double ab = sched.alpha_bar_at(ts[0]);
    const T inv = static_cast<T>(1.0 / std::sqrt(1.0 - ab));
    const T k = static_cast<T>(std::sqrt(ab) / std::sqrt(1.0 - ab));
    std::vector<T> offset(x_t.size());
    const auto m = prototypes.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < len; ++j) offset[i * len + j] = k * m[classes[i] * len + j];
    return nd::sub(g, nd::scale(g, x_t, inv), nd::Tensor<T>(x_t.shape(), std::move(offset)));
  }
};

/// Returns `eps` for class `hit` and eps + 1 for every other class, whatever
/// the input. Single-image shape rows only.
template <typename T>
struct FixedOracle {
  nd::Tensor<T> eps;  // [1, C, H, W]
  std::size_t hit = 0;
  std::size_t classes = 4;

  std::size_t num_classes() const { return classes; }

  nd::Tensor<T> predict(nd::Graph<T>&, const nd::Tensor<T>& x_t, std::span<const std::size_t> cs,
                        std::span<const std::size_t>) const {
    const std::size_t n = x_t.dim(0), len = eps.size();
    std::vector<T> out(n * len);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < len; ++j) out[i * len + j] = eps[j] + (cs[i] == hit ? T(0) : T(1));
    return nd::Tensor<T>(x_t.shape(), std::move(out));
  }
};

}  // namespace noop::testing
