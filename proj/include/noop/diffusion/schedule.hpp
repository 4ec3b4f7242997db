#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "noop/nd/ops.hpp"

namespace noop::diffusion {

/// Linear-beta DDPM schedule. Timesteps are 1-based: t in [1, T] reads
/// betas[t-1] and alpha_bar[t-1].
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bar;

  void check_t(std::size_t t) const {
    if (t < 1 || t > T) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
  }
  double alpha_bar_at(std::size_t t) const {
    check_t(t);
    return alpha_bar[t - 1];
  }
};

inline NoiseSchedule make_schedule(std::size_t T = 1000, double beta_start = 1e-4, double beta_end = 2e-2) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - s.betas[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, differentiable in both.
template <typename T>
nd::Tensor<T> forward_diffuse(nd::Graph<T>& g, const nd::Tensor<T>& x0, std::size_t t, const nd::Tensor<T>& eps,
                              const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar_at(t);
  if (x0.shape() != eps.shape()) {
    throw nd::ShapeError("forward_diffuse: x0 " + nd::to_string(x0.shape()) + " vs eps " + nd::to_string(eps.shape()));
  }
  return nd::add(g, nd::scale(g, x0, static_cast<T>(std::sqrt(ab))), nd::scale(g, eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

/// Untracked forward process with a separate timestep per leading-axis row.
template <typename T>
nd::Tensor<T> diffuse_rows(const nd::Tensor<T>& x0, std::span<const std::size_t> ts, const nd::Tensor<T>& eps,
                           const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) throw nd::ShapeError("diffuse_rows: x0 and eps differ in shape");
  if (x0.dim(0) != ts.size()) throw nd::ShapeError("diffuse_rows: one timestep per row required");
  const std::size_t len = x0.size() / ts.size();
  std::vector<T> out(x0.size());
  const auto xd = x0.data(), ed = eps.data();
  for (std::size_t r = 0; r < ts.size(); ++r) {
    const double ab = sched.alpha_bar_at(ts[r]);
    const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t j = r * len; j < (r + 1) * len; ++j) out[j] = a * xd[j] + b * ed[j];
  }
  return nd::Tensor<T>(x0.shape(), std::move(out));
}

}  // namespace noop::diffusion
