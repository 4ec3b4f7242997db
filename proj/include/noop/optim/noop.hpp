#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "noop/data/dataset.hpp"
#include "noop/dc/classifier.hpp"
#include "noop/diffusion/denoiser.hpp"
#include "noop/diffusion/schedule.hpp"
#include "noop/nd/adam.hpp"
#include "noop/nd/checkpoint.hpp"
#include "noop/optim/meta_network.hpp"

namespace noop::optim {

struct NoOpConfig {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr_eps = 1e-2;
  double lr_meta = 1e-3;
  std::size_t t = 500;
  bool use_meta = true;
  std::uint64_t seed = 0;
};

/// Learnable dataset noise eps [1, C, H, W], the Meta-Network producing
/// per-image offsets, and one Adam state for each.
template <typename T>
struct NoOpState {
  nd::Tensor<T> eps;
  MetaNetwork<T> meta;
  nd::AdamState<T> adam_eps;
  nd::AdamState<T> adam_meta;
  std::size_t t_fixed = 500;
  bool use_meta = true;

  nd::Shape image_shape() const { return {eps.dim(1), eps.dim(2), eps.dim(3)}; }
};

/// eps ~ N(0, 1) from Rng(seed); meta weights from an independent stream.
template <typename T>
NoOpState<T> make_state(std::size_t channels, std::size_t image_size, const NoOpConfig& cfg) {
  NoOpState<T> s;
  nd::Rng rng(cfg.seed);
  s.eps = rng.template normal_tensor<T>({1, channels, image_size, image_size}, true);
  s.meta = MetaNetwork<T>(channels, image_size, nd::mix_seed(cfg.seed, 7));
  s.adam_eps = nd::AdamState<T>(nd::AdamConfig{.lr = cfg.lr_eps});
  s.adam_meta = nd::AdamState<T>(nd::AdamConfig{.lr = cfg.lr_meta});
  s.t_fixed = cfg.t;
  s.use_meta = cfg.use_meta;
  return s;
}

/// Deep copy: tensors, buffers and optimizer moments are not shared.
template <typename T>
NoOpState<T> clone_state(const NoOpState<T>& s) {
  NoOpState<T> c = s;
  c.eps = s.eps.clone(s.eps.requires_grad());
  c.meta = MetaNetwork<T>(s.eps.dim(1), s.eps.dim(2), 0);
  nd::copy_values(s.meta.params(), c.meta.params());
  return c;
}

/// eps* = eps + U(x0) for each row of x0[N, C, H, W]; eps alone when the
/// Meta-Network is disabled.
template <typename T>
nd::Tensor<T> compose_noise(nd::Graph<T>& g, const NoOpState<T>& s, const nd::Tensor<T>& x0, bool training) {
  if (x0.ndim() != 4 || nd::Shape{x0.dim(1), x0.dim(2), x0.dim(3)} != s.image_shape()) {
    throw nd::ShapeError("compose_noise: images " + nd::to_string(x0.shape()) + " do not match noise " +
                         nd::to_string(s.eps.shape()));
  }
  auto base = nd::repeat_rows(g, s.eps, x0.dim(0));
  if (!s.use_meta) return base;
  return nd::add(g, base, s.meta(g, x0, training));
}

/// p[n, k] = -||eps*_n - eps_hat(x_t, c_k, t)||^2 with x_t built from eps*.
/// Gradients reach eps* through x_t and through the regression target.
template <typename T, typename M>
nd::Tensor<T> noop_logits(nd::Graph<T>& g, const M& model, const diffusion::NoiseSchedule& sched,
                          const nd::Tensor<T>& x0, const nd::Tensor<T>& eps_star, std::size_t t,
                          std::span<const std::size_t> classes) {
  if (classes.empty()) throw std::invalid_argument("noop_logits: empty class set");
  const std::size_t n = x0.dim(0), k = classes.size();
  const auto x_t = diffusion::forward_diffuse(g, x0, t, eps_star, sched);
  std::vector<std::size_t> cs(n * k), ts(n * k, t);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) cs[i * k + j] = classes[j];
  const auto pred = model.predict(g, nd::repeat_rows(g, x_t, k), cs, ts);
  const auto d = nd::sqdiff_rows(g, pred, nd::repeat_rows(g, eps_star, k));
  return nd::scale(g, nd::reshape(g, d, {n, k}), T(-1));
}

/// Row-wise z-score with a 1e-12 guard on sigma.
template <typename T>
nd::Tensor<T> zscore(nd::Graph<T>& g, const nd::Tensor<T>& p) {
  if (p.ndim() != 2 || p.dim(1) < 2) throw std::invalid_argument("zscore: needs at least two classes");
  return nd::zscore_rows(g, p, T(1e-12));
}

/// Mean cross-entropy of softmax(z) against the labels.
template <typename T>
nd::Tensor<T> noop_loss(nd::Graph<T>& g, const nd::Tensor<T>& z, std::span<const std::size_t> labels) {
  return nd::cross_entropy(g, z, labels);
}

struct NormalizedLogits {
  std::vector<double> p;
  double mu = 0;
  double sigma = 0;
  std::vector<double> z;
};

/// Untracked z-score of a single logit vector, for inspection and reports.
inline NormalizedLogits normalize(std::span<const double> p) {
  if (p.size() < 2) throw std::invalid_argument("normalize: needs at least two classes");
  NormalizedLogits r{{p.begin(), p.end()}, 0, 0, {}};
  for (double v : p) r.mu += v;
  r.mu /= static_cast<double>(p.size());
  double var = 0;
  for (double v : p) var += (v - r.mu) * (v - r.mu);
  r.sigma = std::sqrt(var / static_cast<double>(p.size()));
  for (double v : p) r.z.push_back(r.sigma == 0 ? 0.0 : (v - r.mu) / (r.sigma + 1e-12));
  return r;
}

using EpochHook = std::function<void(std::size_t epoch, double mean_loss)>;

/// Trains eps (lr_eps) and, when enabled, the Meta-Network (lr_meta) with the
/// z-scored cross-entropy over the few-shot images. Returns per-epoch mean
/// of the per-batch losses. The denoiser must be frozen and stays untouched.
template <typename T>
std::vector<double> train_noop(const diffusion::Denoiser<T>& model, const diffusion::NoiseSchedule& sched,
                               const data::Dataset& ds, std::span<const std::size_t> indices, NoOpState<T>& s,
                               const NoOpConfig& cfg, const EpochHook& on_epoch = {}) {
  if (indices.empty()) throw std::invalid_argument("train_noop: empty train set");
  if (!model.frozen()) throw std::logic_error("train_noop: denoiser must be frozen");
  if (cfg.batch == 0) throw std::invalid_argument("train_noop: batch must be positive");
  std::vector<std::size_t> classes(model.num_classes());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  if (!s.eps.requires_grad()) s.eps.set_requires_grad(true);
  auto meta_params = s.meta.params().trainable();
  std::vector<nd::Tensor<T>> eps_param{s.eps};
  nd::Rng order_rng(nd::mix_seed(cfg.seed, 3));
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, n);
      const auto x0 = data::to_tensor<T>(ds, idx);
      const auto labels = data::labels_of(ds, idx);
      s.eps.zero_grad();
      for (auto& p : meta_params) p.zero_grad();
      nd::Graph<T> g;
      const auto eps_star = compose_noise(g, s, x0, true);
      const auto z = zscore(g, noop_logits(g, model, sched, x0, eps_star, s.t_fixed, classes));
      const auto loss = noop_loss(g, z, labels);
      g.backward(loss);
      nd::adam_step<T>(eps_param, s.adam_eps);
      if (s.use_meta) nd::adam_step<T>(meta_params, s.adam_meta);
      total += static_cast<double>(loss.item());
      ++batches;
    }
    curve.push_back(total / static_cast<double>(batches));
    if (on_epoch) on_epoch(epoch, curve.back());
  }
  return curve;
}

/// eps* for every row of x0, Meta-Network in eval mode, untracked.
template <typename T>
nd::Tensor<T> inference_noise(const NoOpState<T>& s, const nd::Tensor<T>& x0) {
  NoOpState<T> view = s;
  view.eps = s.eps.clone();
  nd::Graph<T> g;
  return compose_noise(g, view, x0, false).clone();
}

/// Single-noise DC with eps* in place of a random draw.
template <typename T, dc::NoisePredictor<T> M>
std::vector<dc::ClassScores> classify_noop(const M& model, const diffusion::NoiseSchedule& sched,
                                           const NoOpState<T>& s, const nd::Tensor<T>& x0,
                                           std::span<const std::size_t> classes) {
  return dc::evaluate_set<T>(model, sched, x0, s.t_fixed, inference_noise(s, x0), classes);
}

/// Applies a state trained elsewhere to the images of `ds` at `indices` with
/// the target model; returns accuracy.
template <typename T, dc::NoisePredictor<T> M>
double transfer_accuracy(const M& model, const diffusion::NoiseSchedule& sched, const NoOpState<T>& s,
                         const data::Dataset& ds, std::span<const std::size_t> indices) {
  if (nd::Shape{ds.channels, ds.height, ds.width} != s.image_shape()) {
    throw nd::ShapeError("transfer: target images differ in shape from the trained noise");
  }
  std::vector<std::size_t> classes(model.num_classes());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  const auto scores = classify_noop<T>(model, sched, s, data::to_tensor<T>(ds, indices), classes);
  return dc::accuracy(dc::predictions(scores), data::labels_of(ds, indices));
}

/// "noop.eps" followed by the Meta-Network tensors "meta.*".
template <typename T>
nd::ParamList<T> state_params(const NoOpState<T>& s) {
  nd::ParamList<T> list;
  list.add("noop.eps", s.eps);
  const auto meta = s.meta.params();
  for (const auto& item : meta.items()) list.add(item.name, item.tensor);
  return list;
}

template <typename T>
void save_state(const std::filesystem::path& path, const NoOpState<T>& s) {
  nd::save_checkpoint<T>(path, state_params(s).items());
}

/// Loads eps and the Meta-Network into a state built with the same shape.
template <typename T>
void load_state(const std::filesystem::path& path, NoOpState<T>& s) {
  nd::restore<T>(nd::load_checkpoint(path), state_params(s));
}

}  // namespace noop::optim
