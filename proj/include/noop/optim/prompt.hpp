#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "noop/data/dataset.hpp"
#include "noop/diffusion/denoiser.hpp"
#include "noop/diffusion/schedule.hpp"
#include "noop/nd/adam.hpp"

namespace noop::optim {

struct PromptConfig {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

/// Learns one offset vector per class, added to the frozen model's class
/// embedding, with the denoising MSE on the few-shot images (random t and
/// noise per sample). Offsets start at zero and stay installed on `model`.
/// Returns the per-epoch mean loss.
template <typename T>
std::vector<double> train_prompt(diffusion::Denoiser<T>& model, const diffusion::NoiseSchedule& sched,
                                 const data::Dataset& ds, std::span<const std::size_t> indices,
                                 const PromptConfig& cfg) {
  if (indices.empty()) throw std::invalid_argument("train_prompt: empty train set");
  if (!model.frozen()) throw std::logic_error("train_prompt: denoiser must be frozen");
  if (cfg.batch == 0 || !(cfg.lr > 0)) throw std::invalid_argument("train_prompt: batch and lr must be positive");
  const auto& mc = model.config();
  auto offsets = nd::Tensor<T>::zeros({mc.classes, mc.emb}, true);
  model.set_prompt(offsets);
  std::vector<nd::Tensor<T>> params{offsets};
  nd::AdamState<T> adam(nd::AdamConfig{.lr = cfg.lr});
  nd::Rng order_rng(nd::mix_seed(cfg.seed, 4));
  nd::Rng noise_rng(nd::mix_seed(cfg.seed, 5));
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
      std::vector<std::size_t> ts(n);
      for (auto& t : ts) t = static_cast<std::size_t>(noise_rng.integer(1, static_cast<long>(sched.T)));
      const auto eps = noise_rng.template normal_tensor<T>(x0.shape());
      const auto x_t = diffusion::diffuse_rows(x0, ts, eps, sched);
      offsets.zero_grad();
      nd::Graph<T> g;
      const auto loss = nd::mse(g, model.predict(g, x_t, labels, ts), eps);
      g.backward(loss);
      nd::adam_step<T>(params, adam);
      total += static_cast<double>(loss.item());
      ++batches;
    }
    curve.push_back(total / static_cast<double>(batches));
  }
  return curve;
}

/// Denoising MSE over `indices` averaged over `draws` (t, noise) samples per
/// image taken from `seed`. A fixed seed gives the same samples every call, so
/// values before and after training compare the objective itself rather than
/// the sampling noise of per-epoch means.
template <typename T>
double denoising_objective(const diffusion::Denoiser<T>& model, const diffusion::NoiseSchedule& sched,
                           const data::Dataset& ds, std::span<const std::size_t> indices, std::size_t draws,
                           std::uint64_t seed) {
  if (indices.empty() || draws == 0) throw std::invalid_argument("denoising_objective: empty sample");
  nd::Rng rng(seed);
  const auto x0 = data::to_tensor<T>(ds, indices);
  const auto labels = data::labels_of(ds, indices);
  double total = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    std::vector<std::size_t> ts(indices.size());
    for (auto& t : ts) t = static_cast<std::size_t>(rng.integer(1, static_cast<long>(sched.T)));
    const auto eps = rng.template normal_tensor<T>(x0.shape());
    nd::Graph<T> g;
    total += static_cast<double>(nd::mse(g, model.predict(g, diffusion::diffuse_rows(x0, ts, eps, sched), labels, ts), eps).item());
  }
  return total / static_cast<double>(draws);
}

/// The installed offsets as "prompt.offsets"; empty when none are set.
template <typename T>
nd::ParamList<T> prompt_params(const diffusion::Denoiser<T>& model) {
  nd::ParamList<T> list;
  if (model.prompt().defined()) list.add("prompt.offsets", model.prompt());
  return list;
}

}  // namespace noop::optim
