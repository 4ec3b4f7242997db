#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "noop/nd/graph.hpp"
#include "noop/nd/tensor.hpp"

namespace noop::nd {

/// Largest relative disagreement between the reverse-mode gradient of the
/// scalar `f` with respect to `target` and central differences with step `h`.
/// `target` is perturbed in place and restored. Other leaves may require grad;
/// only `target`'s gradient is compared.
inline double grad_check_inplace(const std::function<Tensor<double>(Graph<double>&)>& f, Tensor<double> target,
                                 double h = 1e-5) {
  if (!target.requires_grad()) target.set_requires_grad(true);
  target.zero_grad();
  Graph<double> g;
  const Tensor<double> y = f(g);
  if (y.size() != 1) throw ShapeError("grad_check: function output is not scalar: " + to_string(y.shape()));
  std::vector<double> analytic(target.size(), 0.0);
  if (y.requires_grad()) {
    g.backward(y);
    std::copy(target.grad().begin(), target.grad().end(), analytic.begin());
  }

  auto eval = [&] {
    Graph<double> scratch;
    return f(scratch).item();
  };
  double worst = 0.0;
  auto x = target.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = eval();
    x[i] = saved - h;
    const double fm = eval();
    x[i] = saved;
    const double cd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(cd), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - cd) / denom);
  }
  return worst;
}

/// grad_check for a function of a single input tensor.
inline double grad_check(const std::function<Tensor<double>(Graph<double>&, const Tensor<double>&)>& f,
                         const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> leaf = x.clone(true);
  return grad_check_inplace([&](Graph<double>& g) { return f(g, leaf); }, leaf, h);
}

}  // namespace noop::nd
