#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "noop/nd/tensor.hpp"

namespace noop::nd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}
};

/// One bias-corrected Adam update of `params` from `grads`.
template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state) {
  if (!(state.config.lr > 0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (params.size() != grads.size()) throw ShapeError("adam_step: params and grads differ in count");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T(0));
      state.v.emplace_back(p.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state tracks a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || params[i].size() != state.m[i].size()) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape differs from its gradient or moments");
    }
  }
  state.step += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = static_cast<T>(c.beta1 * m[j] + (1.0 - c.beta1) * g[j]);
      v[j] = static_cast<T>(c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j]);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] = static_cast<T>(p[j] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
    check_finite<T>(p, "adam_step");
  }
}

/// Adam update using each parameter's own gradient buffer.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  std::vector<std::span<const T>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("adam_step: parameter without gradient buffer");
    grads.push_back(p.grad());
  }
  adam_step<T>(params, std::span<const std::span<const T>>(grads), state);
}

}  // namespace noop::nd
