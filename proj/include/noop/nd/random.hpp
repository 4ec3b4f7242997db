#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "noop/nd/tensor.hpp"

namespace noop::nd {

/// splitmix64 finaliser; used to derive independent stream seeds from a base
/// seed and a tag so that adding a consumer never shifts another's stream.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

  /// Uniform integer in [lo, hi].
  long integer(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(engine_); }

  template <typename T>
  T normal() {
    return static_cast<T>(std::normal_distribution<double>(0.0, 1.0)(engine_));
  }

  template <typename T>
  Tensor<T> normal_tensor(Shape shape, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(engine_));
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
  }

  template <typename T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(engine_));
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
  }

  template <typename C>
  void shuffle(C& c) {
    std::shuffle(c.begin(), c.end(), engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace noop::nd
