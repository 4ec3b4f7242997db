#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "noop/diffusion/schedule.hpp"
#include "noop/nd/random.hpp"

namespace noop::dc {

/// Anything that predicts noise for a batch of noisy images under per-row
/// class and timestep conditioning.
template <typename M, typename T>
concept NoisePredictor = requires(const M& m, nd::Graph<T>& g, const nd::Tensor<T>& x,
                                  std::span<const std::size_t> idx) {
  { m.predict(g, x, idx, idx) } -> std::convertible_to<nd::Tensor<T>>;
  { m.num_classes() } -> std::convertible_to<std::size_t>;
};

/// Index of the smallest value; ties go to the lowest index.
inline std::size_t argmin_lowest(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmin over an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[best]) best = i;
  return best;
}

inline std::size_t argmax_lowest(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax over an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct ClassScores {
  std::vector<double> distances;  // one per candidate class, in candidate order
  std::size_t predicted = 0;      // the candidate class with the smallest distance
  std::size_t t = 0;
  std::size_t noise_id = 0;
};

/// Unnormalised squared L2 distance accumulated in double.
template <typename T>
double squared_distance(std::span<const T> a, std::span<const T> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

namespace detail {

inline void require_classes(std::span<const std::size_t> classes) {
  if (classes.empty()) throw std::invalid_argument("class_distances: empty class set");
}

template <typename T>
void require_single(const nd::Tensor<T>& x0, const nd::Tensor<T>& eps) {
  if (x0.ndim() != 4 || x0.dim(0) != 1) throw nd::ShapeError("expected a single image [1,C,H,W]");
  if (x0.shape() != eps.shape()) throw nd::ShapeError("noise shape differs from image shape");
}

inline ClassScores finish(std::vector<double> d, std::span<const std::size_t> classes, std::size_t t,
                          std::size_t noise_id) {
  const std::size_t best = argmin_lowest(d);
  return ClassScores{std::move(d), classes[best], t, noise_id};
}

}  // namespace detail

/// One denoiser pass per candidate class on x_t built from (x0, t, eps).
template <typename T, NoisePredictor<T> M>
ClassScores class_distances(const M& model, const diffusion::NoiseSchedule& sched, const nd::Tensor<T>& x0,
                            std::size_t t, const nd::Tensor<T>& eps, std::span<const std::size_t> classes,
                            std::size_t noise_id = 0) {
  detail::require_classes(classes);
  detail::require_single(x0, eps);
  nd::Graph<T> g;
  const auto x_t = diffusion::forward_diffuse(g, x0, t, eps, sched);
  std::vector<double> d;
  d.reserve(classes.size());
  const std::vector<std::size_t> ts{t};
  for (std::size_t c : classes) {
    const std::vector<std::size_t> cs{c};
    const auto pred = model.predict(g, x_t, cs, ts);
    d.push_back(squared_distance<T>(pred.data(), eps.data()));
  }
  return detail::finish(std::move(d), classes, t, noise_id);
}

/// Distances for every image of x0[N,...] against every candidate class, with
/// each image's own noise row eps[n]. All N x K rows go through the model in
/// one call; the result matches the per-class path bit for bit.
template <typename T, NoisePredictor<T> M>
std::vector<ClassScores> class_distances_batched(const M& model, const diffusion::NoiseSchedule& sched,
                                                 const nd::Tensor<T>& x0, std::size_t t, const nd::Tensor<T>& eps,
                                                 std::span<const std::size_t> classes, std::size_t noise_id = 0) {
  detail::require_classes(classes);
  if (x0.ndim() != 4 || x0.shape() != eps.shape()) throw nd::ShapeError("class_distances_batched: shape mismatch");
  const std::size_t n = x0.dim(0), k = classes.size(), len = x0.size() / n;
  nd::Graph<T> g;
  const auto x_t = diffusion::forward_diffuse(g, x0, t, eps, sched);
  const auto rows = nd::repeat_rows(g, x_t, k);
  std::vector<std::size_t> cs(n * k), ts(n * k, t);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) cs[i * k + j] = classes[j];
  const auto pred = model.predict(g, rows, cs, ts);
  std::vector<ClassScores> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d(k);
    const auto e = eps.data().subspan(i * len, len);
    for (std::size_t j = 0; j < k; ++j) d[j] = squared_distance<T>(pred.data().subspan((i * k + j) * len, len), e);
    out.push_back(detail::finish(std::move(d), classes, t, noise_id));
  }
  return out;
}

/// Chunked batched evaluation over a whole image set.
template <typename T, NoisePredictor<T> M>
std::vector<ClassScores> evaluate_set(const M& model, const diffusion::NoiseSchedule& sched, const nd::Tensor<T>& x0,
                                      std::size_t t, const nd::Tensor<T>& eps, std::span<const std::size_t> classes,
                                      std::size_t noise_id = 0, std::size_t chunk = 32) {
  if (x0.ndim() != 4 || x0.shape() != eps.shape()) throw nd::ShapeError("evaluate_set: shape mismatch");
  const std::size_t n = x0.dim(0), len = x0.size() / n;
  std::vector<ClassScores> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t m = std::min(chunk, n - s);
    nd::Shape shape = x0.shape();
    shape[0] = m;
    auto slice = [&](const nd::Tensor<T>& src) {
      return nd::Tensor<T>(shape, std::vector<T>(src.data().begin() + static_cast<std::ptrdiff_t>(s * len),
                                                 src.data().begin() + static_cast<std::ptrdiff_t>((s + m) * len)));
    };
    auto part = class_distances_batched<T>(model, sched, slice(x0), t, slice(eps), classes, noise_id);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

struct EnsembleResult {
  std::vector<double> mean_distances;
  std::size_t predicted = 0;
  std::size_t evaluations = 0;
};

/// Mean distances over every (t, noise) pair, then argmin.
template <typename T, NoisePredictor<T> M>
EnsembleResult classify_ensemble(const M& model, const diffusion::NoiseSchedule& sched, const nd::Tensor<T>& x0,
                                 std::span<const std::size_t> t_list, std::span<const nd::Tensor<T>> noise_list,
                                 std::span<const std::size_t> classes) {
  if (t_list.empty() || noise_list.empty()) throw std::invalid_argument("classify_ensemble: empty timestep or noise list");
  detail::require_classes(classes);
  std::vector<double> sum(classes.size(), 0.0);
  std::size_t count = 0;
  for (std::size_t t : t_list) {
    for (std::size_t j = 0; j < noise_list.size(); ++j) {
      const auto s = class_distances<T>(model, sched, x0, t, noise_list[j], classes, j);
      for (std::size_t c = 0; c < sum.size(); ++c) sum[c] += s.distances[c];
      ++count;
    }
  }
  for (auto& v : sum) v /= static_cast<double>(count);
  const std::size_t best = argmin_lowest(sum);
  return EnsembleResult{std::move(sum), classes[best], count};
}

/// classify_ensemble for every image of x0[N,...] at once. noise_list[j] holds
/// one noise row per image. Sums run in the same (t, noise) order, so each
/// result equals the per-image call bit for bit.
template <typename T, NoisePredictor<T> M>
std::vector<EnsembleResult> ensemble_set(const M& model, const diffusion::NoiseSchedule& sched, const nd::Tensor<T>& x0,
                                         std::span<const std::size_t> t_list, std::span<const nd::Tensor<T>> noise_list,
                                         std::span<const std::size_t> classes) {
  if (t_list.empty() || noise_list.empty()) throw std::invalid_argument("ensemble_set: empty timestep or noise list");
  detail::require_classes(classes);
  const std::size_t n = x0.ndim() == 4 ? x0.dim(0) : 0;
  std::vector<EnsembleResult> out(n, EnsembleResult{std::vector<double>(classes.size(), 0.0), 0, 0});
  for (std::size_t t : t_list) {
    for (std::size_t j = 0; j < noise_list.size(); ++j) {
      const auto scores = evaluate_set<T>(model, sched, x0, t, noise_list[j], classes, j);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < classes.size(); ++c) out[i].mean_distances[c] += scores[i].distances[c];
        ++out[i].evaluations;
      }
    }
  }
  for (auto& r : out) {
    for (auto& v : r.mean_distances) v /= static_cast<double>(r.evaluations);
    r.predicted = classes[argmin_lowest(r.mean_distances)];
  }
  return out;
}

/// Fresh standard-normal noise for each of `count` images, drawn in order.
template <typename T>
nd::Tensor<T> draw_noise(nd::Rng& rng, const nd::Shape& image_batch_shape) {
  return rng.normal_tensor<T>(image_batch_shape);
}

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw std::invalid_argument("accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline std::vector<std::size_t> predictions(std::span<const ClassScores> scores) {
  std::vector<std::size_t> p;
  p.reserve(scores.size());
  for (const auto& s : scores) p.push_back(s.predicted);
  return p;
}

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean_std: empty input");
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

struct InstabilityReport {
  std::vector<double> accuracies;  // one per seed
  double mean = 0;
  double std = 0;                  // population
  double flip_rate = 0;            // images whose prediction differs between any two seeds
  std::vector<std::vector<std::size_t>> predictions;  // [seed][image]
};

/// For each seed, one fresh noise per image (drawn in image order from that
/// seed's generator) and a single-noise classification of the whole set.
template <typename T, NoisePredictor<T> M>
InstabilityReport instability_probe(const M& model, const diffusion::NoiseSchedule& sched, const nd::Tensor<T>& x0,
                                    std::span<const std::size_t> labels, std::size_t t,
                                    std::span<const std::uint64_t> seeds) {
  if (x0.ndim() != 4 || x0.dim(0) == 0 || labels.empty()) throw std::invalid_argument("instability_probe: empty test set");
  if (x0.dim(0) != labels.size()) throw nd::ShapeError("instability_probe: one label per image required");
  if (seeds.size() < 2) throw std::invalid_argument("instability_probe: needs at least two seeds");
  std::vector<std::size_t> classes(model.num_classes());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  InstabilityReport r;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    nd::Rng rng(seeds[s]);
    const auto eps = draw_noise<T>(rng, x0.shape());
    const auto scores = evaluate_set<T>(model, sched, x0, t, eps, classes, s);
    r.predictions.push_back(predictions(scores));
    r.accuracies.push_back(accuracy(r.predictions.back(), labels));
  }
  std::tie(r.mean, r.std) = mean_std(r.accuracies);
  std::size_t flips = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool differs = false;
    for (std::size_t s = 1; s < seeds.size() && !differs; ++s) differs = r.predictions[s][i] != r.predictions[0][i];
    flips += differs ? 1 : 0;
  }
  r.flip_rate = static_cast<double>(flips) / static_cast<double>(labels.size());
  return r;
}

}  // namespace noop::dc
