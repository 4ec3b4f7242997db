#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

#include "noop/data/dataset.hpp"
#include "noop/nd/random.hpp"

namespace noop::data {

/// Render parameters for the shapes generator. The defaults give the standard
/// set; other values produce a shifted domain for transfer experiments.
struct ShapeStyle {
  double foreground = 0.8;
  double background = -0.8;
  double max_offset = 3.0;      // centre jitter in pixels, each axis
  double scale_lo = 0.5;        // shape extent as a fraction of the frame
  double scale_hi = 0.9;
  double gradient_amp = 0.1;    // background ramp amplitude at the frame edge
};

inline ShapeStyle shifted_shape_style() {
  return ShapeStyle{0.6, -0.6, 2.0, 0.6, 1.0, 0.25};
}

namespace detail {

inline void require_size(std::size_t n_per_class, std::size_t size) {
  if (n_per_class == 0) throw std::invalid_argument("generator: n_per_class must be at least 1");
  if (size < 8) throw std::invalid_argument("generator: image size " + std::to_string(size) + " is below 8");
  if (size > 0xffff) throw std::invalid_argument("generator: image size too large");
}

inline bool inside_shape(std::size_t kind, double dx, double dy, double r) {
  switch (kind) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::max(std::abs(dx), std::abs(dy)) <= 0.8 * r;
    case 2: {
      const double arm = r / 3.0;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
    default: {
      // apex up at (0, -r), base on y = 0.7 r with half-width 0.9 r
      if (dy < -r || dy > 0.7 * r) return false;
      return std::abs(dx) <= 0.9 * r * (dy + r) / (1.7 * r);
    }
  }
}

inline Dataset empty_dataset(std::size_t size, std::size_t count, std::vector<std::string> names) {
  Dataset ds;
  ds.height = ds.width = static_cast<std::uint16_t>(size);
  ds.channels = 1;
  ds.class_names = std::move(names);
  ds.labels.reserve(count);
  ds.pixels.reserve(count * size * size);
  return ds;
}

}  // namespace detail

/// Four anti-aliased silhouettes (disc, square, cross, triangle) on a smooth
/// background ramp. Images are interleaved by class.
inline Dataset gen_shapes(std::size_t n_per_class, std::size_t size, std::uint64_t seed,
                          const ShapeStyle& style = {}) {
  detail::require_size(n_per_class, size);
  constexpr std::size_t kClasses = 4, kSuper = 4;
  auto ds = detail::empty_dataset(size, n_per_class * kClasses, {"disc", "square", "cross", "triangle"});
  ds.provenance = "shapes seed=" + std::to_string(seed);
  nd::Rng rng(seed);
  const double centre = (static_cast<double>(size) - 1.0) / 2.0;
  const double half = static_cast<double>(size) / 2.0;
  for (std::size_t i = 0; i < n_per_class * kClasses; ++i) {
    const std::size_t kind = i % kClasses;
    const double cx = centre + rng.uniform(-style.max_offset, style.max_offset);
    const double cy = centre + rng.uniform(-style.max_offset, style.max_offset);
    const double r = rng.uniform(style.scale_lo, style.scale_hi) * half;
    const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        std::size_t hits = 0;
        for (std::size_t sy = 0; sy < kSuper; ++sy)
          for (std::size_t sx = 0; sx < kSuper; ++sx) {
            const double px = static_cast<double>(x) - 0.5 + (static_cast<double>(sx) + 0.5) / kSuper;
            const double py = static_cast<double>(y) - 0.5 + (static_cast<double>(sy) + 0.5) / kSuper;
            hits += detail::inside_shape(kind, px - cx, py - cy, r) ? 1 : 0;
          }
        const double cover = static_cast<double>(hits) / (kSuper * kSuper);
        const double ramp = style.gradient_amp * 0.5 *
                            (gx * (static_cast<double>(x) - centre) + gy * (static_cast<double>(y) - centre)) / half;
        const double v = (1.0 - cover) * (style.background + ramp) + cover * style.foreground;
        ds.pixels.push_back(static_cast<float>(std::clamp(v, -1.0, 1.0)));
      }
    }
    ds.labels.push_back(static_cast<std::uint16_t>(kind));
  }
  return ds;
}

/// Four full-frame periodic patterns: vertical stripes, horizontal stripes,
/// checkerboard and a dot lattice, each zero-mean with random phase and
/// amplitude in [0.75, 0.95].
inline Dataset gen_textures(std::size_t n_per_class, std::size_t size, std::uint64_t seed) {
  detail::require_size(n_per_class, size);
  constexpr std::size_t kClasses = 4;
  auto ds = detail::empty_dataset(size, n_per_class * kClasses, {"vstripes", "hstripes", "checker", "dots"});
  ds.provenance = "textures seed=" + std::to_string(seed);
  nd::Rng rng(seed);
  for (std::size_t i = 0; i < n_per_class * kClasses; ++i) {
    const std::size_t kind = i % kClasses;
    const double amp = rng.uniform(0.75, 0.95);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const long period = rng.integer(2, 3);
    const long cell = rng.integer(1, 2);
    const long lattice = rng.integer(3, 4);
    const long ox = rng.integer(0, 3), oy = rng.integer(0, 3);
    auto stripe = [&](std::size_t pos) {
      const double c = std::cos(2.0 * std::numbers::pi * static_cast<double>(pos) / static_cast<double>(period) + phase);
      return c >= 0 ? 1.0 : -1.0;
    };
    // Background level that makes the dot lattice zero-mean.
    const double dot_bg = -1.0 / static_cast<double>(lattice * lattice - 1);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const long xs = static_cast<long>(x) + ox, ys = static_cast<long>(y) + oy;
        double v = 0;
        switch (kind) {
          case 0: v = stripe(x); break;
          case 1: v = stripe(y); break;
          case 2: v = ((xs / cell + ys / cell) % 2 == 0) ? 1.0 : -1.0; break;
          default: v = (xs % lattice == 0 && ys % lattice == 0) ? 1.0 : dot_bg; break;
        }
        ds.pixels.push_back(static_cast<float>(amp * v));
      }
    }
    ds.labels.push_back(static_cast<std::uint16_t>(kind));
  }
  return ds;
}

}  // namespace noop::data
