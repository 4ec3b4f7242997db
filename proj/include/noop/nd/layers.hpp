#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "noop/nd/ops.hpp"
#include "noop/nd/random.hpp"

namespace noop::nd {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered collection of named tensors. Trainable parameters and state
/// buffers (batch-norm running statistics) are listed together; `trainable`
/// distinguishes them.
template <typename T>
class ParamList {
 public:
  void add(std::string name, Tensor<T> tensor, bool trainable = true) {
    items_.push_back({std::move(name), std::move(tensor)});
    trainable_.push_back(trainable);
  }

  const std::vector<NamedTensor<T>>& items() const { return items_; }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (trainable_[i]) out.push_back(items_[i].tensor);
    return out;
  }

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& item : items_)
      if (item.name == name) return &item.tensor;
    return nullptr;
  }

 private:
  std::vector<NamedTensor<T>> items_;
  std::vector<bool> trainable_;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::size_t stride = 1;
  std::size_t pad = 1;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, Rng& rng, bool zero = false)
      : stride(stride_), pad(kernel / 2) {
    const double bound = zero ? 0.0 : std::sqrt(6.0 / static_cast<double>(in * kernel * kernel));
    weight = zero ? Tensor<T>::zeros({out, in, kernel, kernel}, true)
                  : rng.uniform_tensor<T>({out, in, kernel, kernel}, -bound, bound, true);
    bias = Tensor<T>::zeros({out}, true);
  }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x) const {
    return bias_add(g, conv2d(g, x, weight, stride, pad), bias);
  }

  void collect(ParamList<T>& list, const std::string& prefix) const {
    list.add(prefix + ".w", weight);
    list.add(prefix + ".b", bias);
  }
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = std::sqrt(3.0 / static_cast<double>(in));
    weight = rng.uniform_tensor<T>({out, in}, -bound, bound, true);
    bias = Tensor<T>::zeros({out}, true);
  }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x) const {
    return bias_add(g, matmul_nt(g, x, weight), bias);
  }

  void collect(ParamList<T>& list, const std::string& prefix) const {
    list.add(prefix + ".w", weight);
    list.add(prefix + ".b", bias);
  }
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta, running_mean, running_var;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma(Tensor<T>::full({channels}, T(1), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))) {}

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x, bool training) const {
    return batch_norm(g, x, gamma, beta, running_mean, running_var, training);
  }

  void collect(ParamList<T>& list, const std::string& prefix) const {
    list.add(prefix + ".gamma", gamma);
    list.add(prefix + ".beta", beta);
    list.add(prefix + ".running_mean", running_mean, false);
    list.add(prefix + ".running_var", running_var, false);
  }
};

/// Copies values from `src` into same-named tensors of `dst` in place.
/// Shapes must match; every tensor of `dst` must be present in `src`.
template <typename T>
void copy_values(const ParamList<T>& src, const ParamList<T>& dst) {
  for (const auto& item : dst.items()) {
    const Tensor<T>* from = src.find(item.name);
    if (from == nullptr) throw ShapeError("missing tensor '" + item.name + "'");
    if (from->shape() != item.tensor.shape()) {
      throw ShapeError("tensor '" + item.name + "' has shape " + to_string(from->shape()) + ", expected " +
                       to_string(item.tensor.shape()));
    }
    Tensor<T> target = item.tensor;
    std::copy(from->data().begin(), from->data().end(), target.mutable_data().begin());
  }
}

template <typename T>
void set_requires_grad(const ParamList<T>& list, bool on) {
  for (auto t : list.trainable()) t.set_requires_grad(on);
}

}  // namespace noop::nd
