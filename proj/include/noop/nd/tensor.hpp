#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <cstring>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace noop::nd {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ',';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

/// Throws on NaN or Inf. Scans exponent bits without branching so the loop
/// vectorises; it runs on every tensor an op produces.
template <typename T>
void check_finite(std::span<const T> values, const char* where) {
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    using U = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    constexpr U exp_mask = std::is_same_v<T, float> ? U(0x7f800000u) : U(0x7ff0000000000000ull);
    U bad = 0;
    for (const T& v : values) bad |= U((std::bit_cast<U>(v) & exp_mask) == exp_mask);
    if (bad == 0) return;
  }
  for (const T& v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value produced by ") + where);
    }
  }
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized iff requires_grad
  bool requires_grad = false;
  bool leaf = true;
};

/// Handle to a dense row-major array. Copies share storage; use clone() for a
/// deep copy. Leaves created with requires_grad receive gradients from
/// backward(); intermediate results of recorded ops carry a grad buffer too.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape));
    }
    if (numel(shape) != data.size()) {
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
    }
    check_finite<T>(data, "tensor construction");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->leaf; }

  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
      impl_->grad.assign(impl_->data.size(), T(0));
    } else {
      impl_->grad.clear();
    }
  }

  void zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  T operator[](std::size_t i) const { return impl_->data[i]; }
  std::vector<T> to_vector() const { return impl_->data; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return impl_->data[0];
  }

  /// Deep copy of the values, detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(impl_->shape, impl_->data, requires_grad);
  }

  /// Same values reinterpreted under another shape, no gradient tracking.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), impl_->data); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(impl_->shape, std::vector<U>(impl_->data.begin(), impl_->data.end()));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

  static Tensor from_impl(std::shared_ptr<TensorImpl<T>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    if (std::memcmp(&da[i], &db[i], sizeof(T)) != 0) return false;
  }
  return true;
}

}  // namespace noop::nd
