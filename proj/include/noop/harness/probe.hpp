#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "noop/data/dataset.hpp"
#include "noop/dc/classifier.hpp"
#include "noop/diffusion/schedule.hpp"
#include "noop/nd/adam.hpp"
#include "noop/nd/layers.hpp"

namespace noop::harness {

struct ProbeConfig {
  std::size_t epochs = 15;
  std::size_t batch = 32;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct ProbeOutput {
  std::vector<std::vector<double>> logits;
  std::vector<std::size_t> predicted;
};

/// Small independent classifier used to measure how much category signal
/// survives in a noised image: two stride-2 conv+ReLU stages and a linear
/// read-out.
template <typename T>
class ProbeClassifier {
 public:
  ProbeClassifier() = default;

  ProbeClassifier(std::size_t channels, std::size_t image_size, std::size_t classes, std::uint64_t seed)
      : channels_(channels), size_(image_size), classes_(classes) {
    if (image_size < 4 || image_size % 4 != 0 || classes < 2) {
      throw std::invalid_argument("ProbeClassifier: image size must be a multiple of 4 and classes >= 2");
    }
    nd::Rng rng(seed);
    c1_ = nd::Conv2d<T>(channels, 8, 3, 2, rng);
    c2_ = nd::Conv2d<T>(8, 16, 3, 2, rng);
    fc_ = nd::Linear<T>(16 * (image_size / 4) * (image_size / 4), classes, rng);
  }

  std::size_t num_classes() const { return classes_; }

  nd::Tensor<T> logits(nd::Graph<T>& g, const nd::Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != channels_ || x.dim(2) != size_ || x.dim(3) != size_) {
      throw nd::ShapeError("ProbeClassifier: input " + nd::to_string(x.shape()) + " does not match the probe");
    }
    auto h = nd::relu(g, c2_(g, nd::relu(g, c1_(g, x))));
    return fc_(g, nd::reshape(g, h, {x.dim(0), h.size() / x.dim(0)}));
  }

  /// Untracked logits and argmax (lowest index on ties) for every row.
  ProbeOutput evaluate(const nd::Tensor<T>& x) const {
    nd::Graph<T> g;
    const auto z = logits(g, x);
    ProbeOutput out;
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      std::vector<double> row(classes_);
      for (std::size_t k = 0; k < classes_; ++k) row[k] = static_cast<double>(z[i * classes_ + k]);
      out.predicted.push_back(dc::argmax_lowest(row));
      out.logits.push_back(std::move(row));
    }
    return out;
  }

  nd::ParamList<T> params() const {
    nd::ParamList<T> list;
    c1_.collect(list, "probe.c1");
    c2_.collect(list, "probe.c2");
    fc_.collect(list, "probe.fc");
    return list;
  }

  /// Accuracy on clean images, recorded as the certificate destruction_probe
  /// requires. Throws if it falls short of `min_accuracy`.
  double certify(const data::Dataset& ds, std::span<const std::size_t> indices, double min_accuracy) {
    const double acc = dc::accuracy(evaluate(data::to_tensor<T>(ds, indices)).predicted, data::labels_of(ds, indices));
    if (acc < min_accuracy) {
      throw std::runtime_error("probe reaches only " + std::to_string(acc) + " clean accuracy, below " +
                               std::to_string(min_accuracy));
    }
    clean_accuracy_ = acc;
    return acc;
  }
  std::optional<double> clean_accuracy() const { return clean_accuracy_; }

 private:
  std::size_t channels_ = 0, size_ = 0, classes_ = 0;
  nd::Conv2d<T> c1_, c2_;
  nd::Linear<T> fc_;
  std::optional<double> clean_accuracy_;
};

/// Cross-entropy training on clean images. Returns the per-epoch mean loss.
template <typename T>
std::vector<double> train_probe(ProbeClassifier<T>& probe, const data::Dataset& ds,
                                std::span<const std::size_t> indices, const ProbeConfig& cfg) {
  if (indices.empty()) throw std::invalid_argument("train_probe: empty train set");
  auto params = probe.params().trainable();
  nd::AdamState<T> adam(nd::AdamConfig{.lr = cfg.lr});
  nd::Rng order_rng(nd::mix_seed(cfg.seed, 6));
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, n);
      for (auto& p : params) p.zero_grad();
      nd::Graph<T> g;
      const auto loss = nd::cross_entropy(g, probe.logits(g, data::to_tensor<T>(ds, idx)), data::labels_of(ds, idx));
      g.backward(loss);
      nd::adam_step<T>(params, adam);
      total += static_cast<double>(loss.item());
      ++batches;
    }
    curve.push_back(total / static_cast<double>(batches));
  }
  return curve;
}

/// Probe output on x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one
/// noise row per image. The probe must carry a clean-accuracy certificate.
template <typename T>
ProbeOutput destruction_probe(const ProbeClassifier<T>& probe, const diffusion::NoiseSchedule& sched,
                              const nd::Tensor<T>& x0, const nd::Tensor<T>& eps, std::size_t t) {
  if (!probe.clean_accuracy()) throw std::logic_error("destruction_probe: probe has not been trained and certified");
  const std::vector<std::size_t> ts(x0.ndim() == 4 ? x0.dim(0) : 0, t);
  return probe.evaluate(diffusion::diffuse_rows(x0, ts, eps, sched));
}

}  // namespace noop::harness
