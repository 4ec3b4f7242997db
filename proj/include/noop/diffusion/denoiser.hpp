#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "noop/nd/layers.hpp"
#include "noop/nd/random.hpp"

namespace noop::diffusion {

struct DenoiserConfig {
  std::size_t classes = 4;
  std::size_t channels = 1;
  std::size_t image_size = 16;  // square images, divisible by 4
  std::size_t base = 16;        // channels at full resolution, doubled per level
  std::size_t emb = 32;         // time/class embedding width
};

/// Sinusoidal timestep features [N, dim]: sin for the first half, cos for the
/// second, frequencies spaced geometrically from 1 down to 1/10000.
template <typename T>
nd::Tensor<T> timestep_features(std::span<const std::size_t> ts, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep_features: dim must be even and >= 2");
  const std::size_t half = dim / 2;
  std::vector<T> out(ts.size() * dim);
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double a = static_cast<double>(ts[n]) * freq;
      out[n * dim + i] = static_cast<T>(std::sin(a));
      out[n * dim + half + i] = static_cast<T>(std::cos(a));
    }
  return nd::Tensor<T>({ts.size(), dim}, std::move(out));
}

/// Class-conditional noise predictor: a two-level U-Net with SiLU
/// activations. The conditioning vector (time MLP + class embedding + optional
/// per-class prompt offset) is projected to a per-channel bias at each stage.
template <typename T>
class Denoiser {
 public:
  Denoiser() = default;

  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.classes == 0) throw std::invalid_argument("Denoiser: needs at least one class");
    if (cfg.image_size < 4 || cfg.image_size % 4 != 0) {
      throw std::invalid_argument("Denoiser: image size must be a positive multiple of 4");
    }
    nd::Rng rng(seed);
    const std::size_t b = cfg.base, e = cfg.emb;
    time1_ = nd::Linear<T>(e, e, rng);
    time2_ = nd::Linear<T>(e, e, rng);
    class_emb_ = rng.normal_tensor<T>({cfg.classes, e}, true);
    in_ = nd::Conv2d<T>(cfg.channels, b, 3, 1, rng);
    mid0_ = nd::Conv2d<T>(b, b, 3, 1, rng);
    down1_ = nd::Conv2d<T>(b, 2 * b, 3, 2, rng);
    mid1_ = nd::Conv2d<T>(2 * b, 2 * b, 3, 1, rng);
    down2_ = nd::Conv2d<T>(2 * b, 4 * b, 3, 2, rng);
    mid2_ = nd::Conv2d<T>(4 * b, 4 * b, 3, 1, rng);
    up1_ = nd::Conv2d<T>(6 * b, 2 * b, 3, 1, rng);
    up2_ = nd::Conv2d<T>(3 * b, b, 3, 1, rng);
    out_ = nd::Conv2d<T>(b, cfg.channels, 3, 1, rng, /*zero=*/true);
    proj_in_ = nd::Linear<T>(e, b, rng);
    proj_d1_ = nd::Linear<T>(e, 2 * b, rng);
    proj_d2_ = nd::Linear<T>(e, 4 * b, rng);
    proj_u1_ = nd::Linear<T>(e, 2 * b, rng);
    proj_u2_ = nd::Linear<T>(e, b, rng);
  }

  const DenoiserConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return cfg_.classes; }

  /// eps_hat for each row of x_t[N, C, H, W] under its own class and timestep.
  nd::Tensor<T> predict(nd::Graph<T>& g, const nd::Tensor<T>& x_t, std::span<const std::size_t> classes,
                        std::span<const std::size_t> timesteps) const {
    const std::size_t n = x_t.ndim() == 4 ? x_t.dim(0) : 0;
    if (n == 0 || x_t.dim(1) != cfg_.channels || x_t.dim(2) != cfg_.image_size || x_t.dim(3) != cfg_.image_size) {
      throw nd::ShapeError("Denoiser: input " + nd::to_string(x_t.shape()) + " does not match the model");
    }
    if (classes.size() != n || timesteps.size() != n) {
      throw nd::ShapeError("Denoiser: one class and one timestep per image required");
    }
    for (auto c : classes) {
      if (c >= cfg_.classes) throw std::out_of_range("Denoiser: class " + std::to_string(c) + " out of range");
    }
    auto temb = timestep_features<T>(timesteps, cfg_.emb);
    auto cond = time2_(g, nd::silu(g, time1_(g, temb)));
    cond = nd::add(g, cond, nd::embedding(g, class_emb_, classes));
    if (prompt_.defined()) cond = nd::add(g, cond, nd::embedding(g, prompt_, classes));
    auto s = nd::silu(g, cond);

    auto h0 = nd::silu(g, nd::bias_add(g, in_(g, x_t), proj_in_(g, s)));
    h0 = nd::silu(g, mid0_(g, h0));
    auto h1 = nd::silu(g, nd::bias_add(g, down1_(g, h0), proj_d1_(g, s)));
    h1 = nd::silu(g, mid1_(g, h1));
    auto h2 = nd::silu(g, nd::bias_add(g, down2_(g, h1), proj_d2_(g, s)));
    h2 = nd::silu(g, mid2_(g, h2));
    auto u1 = nd::concat_channels(g, nd::upsample2x(g, h2), h1);
    u1 = nd::silu(g, nd::bias_add(g, up1_(g, u1), proj_u1_(g, s)));
    auto u2 = nd::concat_channels(g, nd::upsample2x(g, u1), h0);
    u2 = nd::silu(g, nd::bias_add(g, up2_(g, u2), proj_u2_(g, s)));
    return out_(g, u2);
  }

  /// Same class and timestep for every row.
  nd::Tensor<T> predict(nd::Graph<T>& g, const nd::Tensor<T>& x_t, std::size_t c, std::size_t t) const {
    const std::size_t n = x_t.ndim() > 0 ? x_t.dim(0) : 0;
    std::vector<std::size_t> cs(n, c), ts(n, t);
    return predict(g, x_t, cs, ts);
  }

  /// All network weights, named "denoiser.*". Prompt offsets are not included.
  nd::ParamList<T> params() const {
    nd::ParamList<T> list;
    time1_.collect(list, "denoiser.time1");
    time2_.collect(list, "denoiser.time2");
    list.add("denoiser.class_emb", class_emb_);
    in_.collect(list, "denoiser.in");
    mid0_.collect(list, "denoiser.mid0");
    down1_.collect(list, "denoiser.down1");
    mid1_.collect(list, "denoiser.mid1");
    down2_.collect(list, "denoiser.down2");
    mid2_.collect(list, "denoiser.mid2");
    up1_.collect(list, "denoiser.up1");
    up2_.collect(list, "denoiser.up2");
    out_.collect(list, "denoiser.out");
    proj_in_.collect(list, "denoiser.proj_in");
    proj_d1_.collect(list, "denoiser.proj_d1");
    proj_d2_.collect(list, "denoiser.proj_d2");
    proj_u1_.collect(list, "denoiser.proj_u1");
    proj_u2_.collect(list, "denoiser.proj_u2");
    return list;
  }

  /// Frozen weights carry no gradient buffers, so backward passes skip their
  /// weight gradients entirely and no optimizer can reach them.
  void set_frozen(bool frozen) { nd::set_requires_grad(params(), !frozen); }
  bool frozen() const { return !class_emb_.requires_grad(); }

  /// Per-class offsets [K, emb] added to the class embedding; an undefined
  /// tensor removes them.
  void set_prompt(nd::Tensor<T> offsets) {
    if (offsets.defined() && offsets.shape() != nd::Shape{cfg_.classes, cfg_.emb}) {
      throw nd::ShapeError("Denoiser: prompt offsets must be [K, emb], got " + nd::to_string(offsets.shape()));
    }
    prompt_ = std::move(offsets);
  }
  const nd::Tensor<T>& prompt() const { return prompt_; }

 private:
  DenoiserConfig cfg_;
  nd::Linear<T> time1_, time2_;
  nd::Tensor<T> class_emb_;
  nd::Conv2d<T> in_, mid0_, down1_, mid1_, down2_, mid2_, up1_, up2_, out_;
  nd::Linear<T> proj_in_, proj_d1_, proj_d2_, proj_u1_, proj_u2_;
  nd::Tensor<T> prompt_;
};

}  // namespace noop::diffusion
