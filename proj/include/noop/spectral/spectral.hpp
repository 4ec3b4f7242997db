#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace noop::spectral {

/// Row-major M x N complex array; F(u, v) sits at u * N + v.
struct Spectrum {
  std::size_t rows = 0, cols = 0;
  std::vector<std::complex<double>> bins;

  std::complex<double> at(std::size_t u, std::size_t v) const { return bins[u * cols + v]; }
};

namespace detail {

// Twiddles e^{sign * 2 pi i k / n} for k in [0, n). The product k*x is reduced
// mod n by the caller, so angles stay small and exact multiples of 2pi/n.
inline std::vector<std::complex<double>> twiddles(std::size_t n, double sign) {
  std::vector<std::complex<double>> w(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    w[k] = {std::cos(a), std::sin(a)};
  }
  return w;
}

// One-dimensional DFT of every row (stride 1) or column of `data` in place.
inline void transform_axis(std::vector<std::complex<double>>& data, std::size_t rows, std::size_t cols,
                           bool along_rows, double sign) {
  const std::size_t n = along_rows ? cols : rows;
  const std::size_t lines = along_rows ? rows : cols;
  const auto w = twiddles(n, sign);
  std::vector<std::complex<double>> in(n), out(n);
  for (std::size_t line = 0; line < lines; ++line) {
    auto idx = [&](std::size_t k) { return along_rows ? line * cols + k : k * cols + line; };
    for (std::size_t k = 0; k < n; ++k) in[k] = data[idx(k)];
    for (std::size_t f = 0; f < n; ++f) {
      std::complex<double> s = 0;
      for (std::size_t x = 0; x < n; ++x) s += in[x] * w[(f * x) % n];
      out[f] = s;
    }
    for (std::size_t k = 0; k < n; ++k) data[idx(k)] = out[k];
  }
}

inline void require_image(std::size_t size, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("dft2: empty image");
  if (size != rows * cols) throw std::invalid_argument("dft2: buffer size does not match rows x cols");
}

}  // namespace detail

/// F(u,v) = sum_{x,y} f(x,y) e^{-2 pi i (ux/M + vy/N)}, computed separably.
inline Spectrum dft2(std::span<const double> image, std::size_t rows, std::size_t cols) {
  detail::require_image(image.size(), rows, cols);
  Spectrum s{rows, cols, std::vector<std::complex<double>>(image.begin(), image.end())};
  detail::transform_axis(s.bins, rows, cols, true, -1.0);
  detail::transform_axis(s.bins, rows, cols, false, -1.0);
  return s;
}

/// Inverse transform including the 1/(MN) factor. Returns complex values;
/// for the spectrum of a real image the imaginary parts are rounding noise.
inline std::vector<std::complex<double>> idft2_complex(const Spectrum& spec) {
  detail::require_image(spec.bins.size(), spec.rows, spec.cols);
  auto data = spec.bins;
  detail::transform_axis(data, spec.rows, spec.cols, true, 1.0);
  detail::transform_axis(data, spec.rows, spec.cols, false, 1.0);
  const double inv = 1.0 / static_cast<double>(spec.rows * spec.cols);
  for (auto& v : data) v *= inv;
  return data;
}

inline std::vector<double> idft2(const Spectrum& spec) {
  const auto c = idft2_complex(spec);
  std::vector<double> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i].real();
  return out;
}

/// Normalised radial distance of bin (u, v) from the centre of the shifted
/// spectrum: 0 at DC, 1 at the corner frequency.
inline double radial_distance(std::size_t u, std::size_t v, std::size_t rows, std::size_t cols) {
  auto signed_freq = [](std::size_t k, std::size_t n) {
    const auto ki = static_cast<double>(k), ni = static_cast<double>(n);
    return k < (n + 1) / 2 ? ki : ki - ni;
  };
  const double hr = static_cast<double>(rows / 2), hc = static_cast<double>(cols / 2);
  const double corner = std::sqrt(hr * hr + hc * hc);
  if (corner == 0.0) return 0.0;
  const double fu = signed_freq(u, rows), fv = signed_freq(v, cols);
  return std::sqrt(fu * fu + fv * fv) / corner;
}

/// Fraction of spectral energy |F|^2 in bins whose radial distance exceeds
/// `cutoff`. An all-zero image has ratio 0.
inline double high_freq_ratio(std::span<const double> image, std::size_t rows, std::size_t cols,
                              double cutoff = 0.3) {
  if (!(cutoff > 0.0 && cutoff < 1.0)) throw std::invalid_argument("high_freq_ratio: cutoff must lie in (0,1)");
  const auto spec = dft2(image, rows, cols);
  double total = 0, high = 0;
  for (std::size_t u = 0; u < rows; ++u)
    for (std::size_t v = 0; v < cols; ++v) {
      const double e = std::norm(spec.at(u, v));
      total += e;
      if (radial_distance(u, v, rows, cols) > cutoff) high += e;
    }
  return total > 0 ? high / total : 0.0;
}

/// Channel-planar image [C, rows, cols]: per-channel ratios averaged.
inline double high_freq_ratio(std::span<const double> planes, std::size_t channels, std::size_t rows,
                              std::size_t cols, double cutoff) {
  if (channels == 0 || planes.size() != channels * rows * cols) {
    throw std::invalid_argument("high_freq_ratio: buffer does not hold channels x rows x cols");
  }
  double s = 0;
  for (std::size_t c = 0; c < channels; ++c) s += high_freq_ratio(planes.subspan(c * rows * cols, rows * cols), rows, cols, cutoff);
  return s / static_cast<double>(channels);
}

struct NoiseStats {
  double mean = 0;
  double variance = 0;  // biased
  double log_pdf = 0;   // under the standard normal of the flattened dimension
};

inline NoiseStats noise_stats(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("noise_stats: empty tensor");
  const double d = static_cast<double>(x.size());
  double s = 0, sq = 0;
  for (double v : x) {
    s += v;
    sq += v * v;
  }
  NoiseStats st;
  st.mean = s / d;
  double var = 0;
  for (double v : x) var += (v - st.mean) * (v - st.mean);
  st.variance = var / d;
  st.log_pdf = -0.5 * d * std::log(2.0 * std::numbers::pi) - 0.5 * sq;
  return st;
}

}  // namespace noop::spectral
