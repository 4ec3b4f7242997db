#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "noop/data/dataset.hpp"
#include "noop/diffusion/denoiser.hpp"
#include "noop/diffusion/schedule.hpp"
#include "noop/nd/adam.hpp"

namespace noop::diffusion {

struct DenoiserTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Mean over the epoch of the per-batch MSE between eps and eps_hat.
using LossCurve = std::vector<double>;

/// Fits `model` to predict the noise added by the forward process on
/// `images` with uniformly drawn timesteps. `on_epoch(epoch, mean_loss)` runs
/// after each epoch when provided.
template <typename T>
LossCurve train_denoiser(Denoiser<T>& model, const data::Dataset& ds, std::span<const std::size_t> indices,
                         const NoiseSchedule& sched, const DenoiserTrainConfig& cfg,
                         const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (indices.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  if (cfg.batch == 0 || !(cfg.lr > 0)) throw std::invalid_argument("train_denoiser: batch and lr must be positive");
  if (ds.classes() != model.config().classes) throw std::invalid_argument("train_denoiser: class count mismatch");
  model.set_frozen(false);
  auto params = model.params().trainable();
  nd::AdamState<T> adam(nd::AdamConfig{.lr = cfg.lr});
  nd::Rng order_rng(nd::mix_seed(cfg.seed, 1));
  nd::Rng noise_rng(nd::mix_seed(cfg.seed, 2));
  std::vector<std::size_t> order(indices.begin(), indices.end());
  LossCurve curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, n);
      auto x0 = data::to_tensor<T>(ds, idx);
      const auto labels = data::labels_of(ds, idx);
      std::vector<std::size_t> ts(n);
      for (auto& t : ts) t = static_cast<std::size_t>(noise_rng.integer(1, static_cast<long>(sched.T)));
      auto eps = noise_rng.normal_tensor<T>(x0.shape());
      auto x_t = diffuse_rows(x0, ts, eps, sched);

      for (auto& p : params) p.zero_grad();
      nd::Graph<T> g;
      auto loss = nd::mse(g, model.predict(g, x_t, labels, ts), eps);
      g.backward(loss);
      nd::adam_step<T>(params, adam);
      total += static_cast<double>(loss.item());
      ++batches;
    }
    curve.push_back(total / static_cast<double>(batches));
    if (on_epoch) on_epoch(epoch, curve.back());
  }
  model.set_frozen(true);
  return curve;
}

}  // namespace noop::diffusion
