#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "noop/nd/graph.hpp"
#include "noop/nd/tensor.hpp"

namespace noop::nd {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// C[M,P] += A[M,K] * B[K,P]. Every C element accumulates over k in ascending
// order whatever the tiling, so results do not depend on M, on P, or on how
// callers batch their work. The main tile keeps 4 rows x 2 vectors of C in
// registers across the whole k loop. With Overwrite the prior contents of C
// are ignored, which gives the same bits as accumulating onto zeros.
template <typename T, bool Overwrite = false>
void gemm_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t P) {
  typedef T V __attribute__((vector_size(32)));
  constexpr std::size_t kLanes = 32 / sizeof(T), kRows = 4, kCols = 2 * kLanes;
  auto load = [](const T* src) {
    V v;
    std::memcpy(&v, src, sizeof(V));
    return v;
  };
  auto store = [](T* dst, V v) { std::memcpy(dst, &v, sizeof(V)); };
  auto tail = [&](std::size_t i0, std::size_t i1, std::size_t p0) {
    for (std::size_t i = i0; i < i1; ++i) {
      T* __restrict c = C + i * P;
      if constexpr (Overwrite) std::fill(c + p0, c + P, T(0));
      const T* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T* __restrict b = B + k * P;
        const T w = a[k];
        for (std::size_t p = p0; p < P; ++p) c[p] += w * b[p];
      }
    }
  };
  std::size_t i = 0;
  for (; i + kRows <= M; i += kRows) {
    const T* a0 = A + (i + 0) * K;
    const T* a1 = A + (i + 1) * K;
    const T* a2 = A + (i + 2) * K;
    const T* a3 = A + (i + 3) * K;
    std::size_t p = 0;
    for (; p + kCols <= P; p += kCols) {
      T* c0 = C + (i + 0) * P + p;
      T* c1 = C + (i + 1) * P + p;
      T* c2 = C + (i + 2) * P + p;
      T* c3 = C + (i + 3) * P + p;
      V x00{}, x01{}, x10{}, x11{}, x20{}, x21{}, x30{}, x31{};
      if constexpr (!Overwrite) {
        x00 = load(c0), x01 = load(c0 + kLanes), x10 = load(c1), x11 = load(c1 + kLanes);
        x20 = load(c2), x21 = load(c2 + kLanes), x30 = load(c3), x31 = load(c3 + kLanes);
      }
      const T* b = B + p;
      for (std::size_t k = 0; k < K; ++k, b += P) {
        const V b0 = load(b), b1 = load(b + kLanes);
        x00 += a0[k] * b0;
        x01 += a0[k] * b1;
        x10 += a1[k] * b0;
        x11 += a1[k] * b1;
        x20 += a2[k] * b0;
        x21 += a2[k] * b1;
        x30 += a3[k] * b0;
        x31 += a3[k] * b1;
      }
      store(c0, x00), store(c0 + kLanes, x01), store(c1, x10), store(c1 + kLanes, x11);
      store(c2, x20), store(c2 + kLanes, x21), store(c3, x30), store(c3 + kLanes, x31);
    }
    if (p < P) tail(i, i + kRows, p);
  }
  tail(i, M, 0);
}

template <typename T>
void gemm_set(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t P) {
  gemm_acc<T, true>(A, B, C, M, K, P);
}

// Images per convolution chunk: enough output positions to fill the GEMM
// tiles, few enough that the patch matrix stays cache resident.
inline std::size_t conv_chunk(std::size_t positions, std::size_t images) {
  constexpr std::size_t kTargetColumns = 512;
  const std::size_t c = std::max<std::size_t>(1, kTargetColumns / positions);
  return std::min(c, images);
}

// Uninitialised scratch storage for buffers that are fully overwritten.
template <typename T>
std::unique_ptr<T[]> scratch(std::size_t n) {
  return std::unique_ptr<T[]>(new T[n]);
}

template <typename T>
std::vector<T> transpose(std::span<const T> a, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  std::vector<T> out(rows * cols);
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock)
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = std::min(rows, r0 + kBlock), c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = a[r * cols + c];
    }
  return out;
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }

  // Output columns ox whose input column ox*stride + kx - pad lies inside.
  std::pair<std::size_t, std::size_t> valid_cols(std::size_t kx) const {
    std::size_t lo = 0;
    while (lo < out_w && lo * stride + kx < pad) ++lo;
    std::size_t hi = lo;
    while (hi < out_w && hi * stride + kx - pad < width) ++hi;
    return {lo, hi};
  }
};

// The copies below are a few floats each; GCC would otherwise turn every
// one into a memset/memcpy library call, which dominated the conv profile.
#if defined(__GNUC__) && !defined(__clang__)
#define NOOP_NO_MEMCALLS __attribute__((optimize("no-tree-loop-distribute-patterns")))
#else
#define NOOP_NO_MEMCALLS
#endif

// col[K, ld] with K = (c, ky, kx); this image fills columns [0, P) of each
// row, P = (oy, ox). ld lets several images share one matrix side by side.
template <typename T>
NOOP_NO_MEMCALLS void im2col(const T* img, const ConvGeometry& g, T* col, std::size_t ld) {
  if (g.stride == 1 && g.out_h == g.height && g.out_w == g.width) {
    // Same-size stride-1 case: each row is the plane shifted by (dy, dx), so
    // copy it in one run and zero the rows and columns that fell off an edge.
    const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    for (std::size_t c = 0; c < g.channels; ++c) {
      const T* plane = img + c * g.height * g.width;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * ld;
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad, dx = static_cast<std::ptrdiff_t>(kx) - pad;
          const std::ptrdiff_t off = dy * W + dx;
          const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off), hi = std::min(H * W, H * W - off);
          for (std::ptrdiff_t j = 0; j < lo; ++j) row[j] = T(0);
          for (std::ptrdiff_t j = lo; j < hi; ++j) row[j] = plane[j + off];
          for (std::ptrdiff_t j = std::max(hi, lo); j < H * W; ++j) row[j] = T(0);
          for (std::ptrdiff_t oy = 0; oy < H; ++oy) {
            T* r = row + oy * W;
            if (oy + dy < 0 || oy + dy >= H) {
              for (std::ptrdiff_t ox = 0; ox < W; ++ox) r[ox] = T(0);
              continue;
            }
            for (std::ptrdiff_t ox = 0; ox < -dx && ox < W; ++ox) r[ox] = T(0);
            for (std::ptrdiff_t ox = std::max<std::ptrdiff_t>(0, W - dx); ox < W; ++ox) r[ox] = T(0);
          }
        }
      }
    }
    return;
  }
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * ld;
        const auto [lo, hi] = g.valid_cols(kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* dst = row + oy * g.out_w;
          const std::size_t iy = oy * g.stride + ky;
          if (iy < g.pad || iy - g.pad >= g.height || lo >= hi) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox] = T(0);
            continue;
          }
          const T* src = img + (c * g.height + (iy - g.pad)) * g.width + (lo * g.stride + kx - g.pad);
          for (std::size_t ox = 0; ox < lo; ++ox) dst[ox] = T(0);
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox - lo];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[(ox - lo) * g.stride];
          }
          for (std::size_t ox = hi; ox < g.out_w; ++ox) dst[ox] = T(0);
        }
      }
    }
  }
}

// Scatter-add of col[K, ld] (first P columns) back into an image buffer.
template <typename T>
NOOP_NO_MEMCALLS void col2im(const T* col, const ConvGeometry& g, T* img, std::size_t ld) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * ld;
        const auto [lo, hi] = g.valid_cols(kx);
        if (lo >= hi) continue;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::size_t iy = oy * g.stride + ky;
          if (iy < g.pad || iy - g.pad >= g.height) continue;
          const T* src = row + oy * g.out_w;
          T* dst = img + (c * g.height + (iy - g.pad)) * g.width + (lo * g.stride + kx - g.pad);
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox - lo] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

#undef NOOP_NO_MEMCALLS

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  Tensor<T> y(a.shape(), std::move(out));
  if (g.any_requires_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::Add, {ai, bi}, y, [ai, bi, yi] {
      accumulate_grad<T>(*ai, yi->grad);
      accumulate_grad<T>(*bi, yi->grad);
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  Tensor<T> y(a.shape(), std::move(out));
  if (g.any_requires_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::Sub, {ai, bi}, y, [ai, bi, yi] {
      accumulate_grad<T>(*ai, yi->grad);
      if (bi->requires_grad) {
        std::vector<T> neg(yi->grad.size());
        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -yi->grad[i];
        accumulate_grad<T>(*bi, neg);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  Tensor<T> y(a.shape(), std::move(out));
  if (g.any_requires_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::Mul, {ai, bi}, y, [ai, bi, yi] {
      const std::size_t n = yi->grad.size();
      std::vector<T> buf(n);
      if (ai->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) buf[i] = yi->grad[i] * bi->data[i];
        accumulate_grad<T>(*ai, buf);
      }
      if (bi->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) buf[i] = yi->grad[i] * ai->data[i];
        accumulate_grad<T>(*bi, buf);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T s) {
  std::vector<T> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * s;
  Tensor<T> y(x.shape(), std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Scale, {xi}, y, [xi, yi, s] {
      std::vector<T> buf(yi->grad.size());
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = yi->grad[i] * s;
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

template <typename T>
Tensor<T> shift(Graph<T>& g, const Tensor<T>& x, T s) {
  std::vector<T> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] + s;
  Tensor<T> y(x.shape(), std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Shift, {xi}, y, [xi, yi] { accumulate_grad<T>(*xi, yi->grad); });
  }
  return y;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] > T(0) ? dx[i] : T(0);
  Tensor<T> y(x.shape(), std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Relu, {xi}, y, [xi, yi] {
      std::vector<T> buf(yi->grad.size());
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = xi->data[i] > T(0) ? yi->grad[i] : T(0);
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

template <typename T>
Tensor<T> silu(Graph<T>& g, const Tensor<T>& x) {
  std::vector<T> out(x.size()), sig(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    sig[i] = T(1) / (T(1) + std::exp(-dx[i]));
    out[i] = dx[i] * sig[i];
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Silu, {xi}, y, [xi, yi, sig = std::move(sig)] {
      std::vector<T> buf(yi->grad.size());
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const T v = xi->data[i];
        buf[i] = yi->grad[i] * (sig[i] + v * sig[i] * (T(1) - sig[i]));
      }
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// A[m,k] * B[k,n].
template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor<T> y({m, n}, std::move(out));
  if (g.any_requires_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::MatMul, {ai, bi}, y, [ai, bi, yi, m, k, n] {
      if (ai->requires_grad) {
        // dA = dY * B^T
        auto bt = detail::transpose<T>(bi->data, k, n);
        std::vector<T> da(m * k, T(0));
        detail::gemm_acc(yi->grad.data(), bt.data(), da.data(), m, n, k);
        accumulate_grad<T>(*ai, da);
      }
      if (bi->requires_grad) {
        // dB = A^T * dY
        auto at = detail::transpose<T>(ai->data, m, k);
        std::vector<T> db(k * n, T(0));
        detail::gemm_acc(at.data(), yi->grad.data(), db.data(), k, m, n);
        accumulate_grad<T>(*bi, db);
      }
    });
  }
  return y;
}

/// A[m,k] * B[n,k]^T, the layout of a dense layer's weight matrix.
template <typename T>
Tensor<T> matmul_nt(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto bt = detail::transpose<T>(b.data(), n, k);
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(a.data().data(), bt.data(), out.data(), m, k, n);
  Tensor<T> y({m, n}, std::move(out));
  if (g.any_requires_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::MatMulNT, {ai, bi}, y, [ai, bi, yi, m, k, n] {
      if (ai->requires_grad) {
        std::vector<T> da(m * k, T(0));
        detail::gemm_acc(yi->grad.data(), bi->data.data(), da.data(), m, n, k);
        accumulate_grad<T>(*ai, da);
      }
      if (bi->requires_grad) {
        auto gt = detail::transpose<T>(yi->grad, m, n);
        std::vector<T> db(n * k, T(0));
        detail::gemm_acc(gt.data(), ai->data.data(), db.data(), n, m, k);
        accumulate_grad<T>(*bi, db);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution family

/// x[N,C,H,W] (*) w[O,C,k,k] with square kernel, zero padding.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                 std::size_t pad) {
  detail::require(x.ndim() == 4 && w.ndim() == 4, "conv2d: expects x[N,C,H,W] and w[O,C,k,k]");
  detail::require(w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3),
                  "conv2d: weight " + to_string(w.shape()) + " incompatible with input " + to_string(x.shape()));
  detail::require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  const std::size_t n_img = x.dim(0), out_c = w.dim(0);
  detail::ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
  detail::require(geo.height + 2 * pad >= geo.kernel && geo.width + 2 * pad >= geo.kernel,
                  "conv2d: kernel larger than padded input");
  geo.out_h = (geo.height + 2 * pad - geo.kernel) / stride + 1;
  geo.out_w = (geo.width + 2 * pad - geo.kernel) / stride + 1;
  const std::size_t K = geo.patch(), P = geo.positions();
  const std::size_t in_stride = geo.channels * geo.height * geo.width;

  // Images are processed in chunks laid side by side, col[K, chunk*P], so
  // that one product W[O,K] * col covers the chunk while staying in cache.
  // The chunking never changes any element's accumulation order.
  const std::size_t chunk = detail::conv_chunk(P, n_img);
  auto col = detail::scratch<T>(K * chunk * P);
  auto prod = detail::scratch<T>(out_c * chunk * P);
  std::vector<T> out(n_img * out_c * P);
  const T* xd = x.data().data();
  for (std::size_t n0 = 0; n0 < n_img; n0 += chunk) {
    const std::size_t nc = std::min(chunk, n_img - n0), NP = nc * P;
    for (std::size_t n = 0; n < nc; ++n) detail::im2col(xd + (n0 + n) * in_stride, geo, col.get() + n * P, NP);
    detail::gemm_set(w.data().data(), col.get(), prod.get(), out_c, K, NP);
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t n = 0; n < nc; ++n)
        std::copy_n(prod.get() + o * NP + n * P, P, out.data() + ((n0 + n) * out_c + o) * P);
  }
  Tensor<T> y({n_img, out_c, geo.out_h, geo.out_w}, std::move(out));
  if (g.any_requires_grad({&x, &w})) {
    auto xi = x.impl(), wi = w.impl(), yi = y.impl();
    g.record(OpKind::Conv2d, {xi, wi}, y, [xi, wi, yi, geo, n_img, out_c, chunk] {
      const std::size_t K = geo.patch(), P = geo.positions();
      const std::size_t in_stride = geo.channels * geo.height * geo.width;
      auto dy = detail::scratch<T>(out_c * chunk * P);
      auto col = detail::scratch<T>(wi->requires_grad ? K * chunk * P : 0);
      auto dcol = detail::scratch<T>(xi->requires_grad ? K * chunk * P : 0);
      std::vector<T> dw(wi->requires_grad ? out_c * K : 0, T(0));
      std::vector<T> dx(xi->requires_grad ? xi->data.size() : 0, T(0));
      std::vector<T> wt;
      // A same-size stride-1 conv has dX = dY (*) flip(W)^T, itself a
      // same-size conv, so dX comes from im2col of dY and one product
      // instead of a col2im scatter.
      const bool transposed = geo.stride == 1 && geo.out_h == geo.height && geo.out_w == geo.width &&
                              2 * geo.pad + 1 == geo.kernel;
      const detail::ConvGeometry tgeo{out_c, geo.height, geo.width, geo.kernel, 1, geo.kernel - 1 - geo.pad,
                                      geo.height, geo.width};
      const std::size_t KT = tgeo.patch(), kk = geo.kernel * geo.kernel;
      if (xi->requires_grad && transposed) {
        wt.resize(geo.channels * KT);
        for (std::size_t o = 0; o < out_c; ++o)
          for (std::size_t c = 0; c < geo.channels; ++c)
            for (std::size_t j = 0; j < kk; ++j) wt[c * KT + o * kk + j] = wi->data[(o * geo.channels + c) * kk + (kk - 1 - j)];
      } else if (xi->requires_grad) {
        wt = detail::transpose<T>(wi->data, out_c, K);
      }
      auto dycol = detail::scratch<T>(xi->requires_grad && transposed ? KT * chunk * P : 0);
      for (std::size_t n0 = 0; n0 < n_img; n0 += chunk) {
        const std::size_t nc = std::min(chunk, n_img - n0), NP = nc * P;
        if (xi->requires_grad && transposed) {
          for (std::size_t n = 0; n < nc; ++n)
            detail::im2col(yi->grad.data() + (n0 + n) * out_c * P, tgeo, dycol.get() + n * P, NP);
          detail::gemm_set(wt.data(), dycol.get(), dcol.get(), geo.channels, KT, NP);
          for (std::size_t c = 0; c < geo.channels; ++c)
            for (std::size_t n = 0; n < nc; ++n)
              std::copy_n(dcol.get() + c * NP + n * P, P, dx.data() + (n0 + n) * in_stride + c * P);
          if (!wi->requires_grad) continue;
        }
        // dY gathered into [O, chunk*P] to match the forward product layout.
        for (std::size_t o = 0; o < out_c; ++o)
          for (std::size_t n = 0; n < nc; ++n)
            std::copy_n(yi->grad.data() + ((n0 + n) * out_c + o) * P, P, dy.get() + o * NP + n * P);
        if (wi->requires_grad) {
          // dW[O,K] += dY[O,NP] * col^T, chunks in image order
          for (std::size_t n = 0; n < nc; ++n)
            detail::im2col(xi->data.data() + (n0 + n) * in_stride, geo, col.get() + n * P, NP);
          const auto col_t = detail::transpose<T>(std::span<const T>(col.get(), K * NP), K, NP);
          detail::gemm_acc(dy.get(), col_t.data(), dw.data(), out_c, NP, K);
        }
        if (xi->requires_grad && !transposed) {
          detail::gemm_set(wt.data(), dy.get(), dcol.get(), K, out_c, NP);
          for (std::size_t n = 0; n < nc; ++n)
            detail::col2im(dcol.get() + n * P, geo, dx.data() + (n0 + n) * in_stride, NP);
        }
      }
      if (wi->requires_grad) accumulate_grad<T>(*wi, dw);
      if (xi->requires_grad) accumulate_grad<T>(*xi, dx);
    });
  }
  return y;
}

/// Nearest-neighbour 2x upsampling of x[N,C,H,W].
template <typename T>
Tensor<T> upsample2x(Graph<T>& g, const Tensor<T>& x) {
  detail::require(x.ndim() == 4, "upsample2x: expects x[N,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(planes * 4 * h * w);
  const auto xd = x.data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        out[(pl * 2 * h + i) * 2 * w + j] = xd[(pl * h + i / 2) * w + j / 2];
  Tensor<T> y({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Upsample2x, {xi}, y, [xi, yi, planes, h, w] {
      std::vector<T> buf(xi->data.size(), T(0));
      for (std::size_t pl = 0; pl < planes; ++pl)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j)
            buf[(pl * h + i / 2) * w + j / 2] += yi->grad[(pl * 2 * h + i) * 2 * w + j];
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

/// Per-channel batch normalisation over x[N,C,...]. In training mode the batch
/// statistics normalise and the running buffers move towards them by
/// `momentum` (running variance uses the unbiased estimate). In eval mode the
/// running buffers normalise. The buffers are mutated in place.
template <typename T>
Tensor<T> batch_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T> running_mean, Tensor<T> running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require(x.ndim() >= 2, "batch_norm: expects x[N,C,...]");
  const std::size_t n_img = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.size() / (n_img * channels);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    detail::require(p->ndim() == 1 && p->dim(0) == channels,
                    "batch_norm: parameter shape " + to_string(p->shape()) + " does not match channels");
  }
  const std::size_t count = n_img * inner;
  std::vector<T> mean(channels), invstd(channels);
  const auto xd = x.data();
  auto idx = [&](std::size_t n, std::size_t c, std::size_t i) { return (n * channels + c) * inner + i; };
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      T s = 0;
      for (std::size_t n = 0; n < n_img; ++n)
        for (std::size_t i = 0; i < inner; ++i) s += xd[idx(n, c, i)];
      const T mu = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t n = 0; n < n_img; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const T d = xd[idx(n, c, i)] - mu;
          v += d * d;
        }
      const T var = v / static_cast<T>(count);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : var;
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = rm[c];
      invstd[c] = T(1) / std::sqrt(rv[c] + eps);
    }
  }
  std::vector<T> xhat(x.size()), out(x.size());
  const auto gd = gamma.data(), bd = beta.data();
  for (std::size_t n = 0; n < n_img; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = idx(n, c, i);
        xhat[k] = (xd[k] - mean[c]) * invstd[c];
        out[k] = gd[c] * xhat[k] + bd[c];
      }
  Tensor<T> y(x.shape(), std::move(out));
  if (g.any_requires_grad({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
    g.record(OpKind::BatchNorm, {xi, gi, bi}, y,
             [xi, gi, bi, yi, xhat = std::move(xhat), invstd, n_img, channels, inner, count, training] {
               auto idx = [&](std::size_t n, std::size_t c, std::size_t i) {
                 return (n * channels + c) * inner + i;
               };
               const auto& dy = yi->grad;
               std::vector<T> dgamma(channels, T(0)), dbeta(channels, T(0));
               std::vector<T> dx(xi->requires_grad ? xi->data.size() : 0);
               for (std::size_t c = 0; c < channels; ++c) {
                 T sum_dy = 0, sum_dy_xhat = 0;
                 for (std::size_t n = 0; n < n_img; ++n)
                   for (std::size_t i = 0; i < inner; ++i) {
                     const std::size_t k = idx(n, c, i);
                     sum_dy += dy[k];
                     sum_dy_xhat += dy[k] * xhat[k];
                   }
                 dgamma[c] = sum_dy_xhat;
                 dbeta[c] = sum_dy;
                 if (!xi->requires_grad) continue;
                 const T gam = gi->data[c];
                 if (training) {
                   const T m = static_cast<T>(count);
                   for (std::size_t n = 0; n < n_img; ++n)
                     for (std::size_t i = 0; i < inner; ++i) {
                       const std::size_t k = idx(n, c, i);
                       dx[k] = gam * invstd[c] / m * (m * dy[k] - sum_dy - xhat[k] * sum_dy_xhat);
                     }
                 } else {
                   for (std::size_t n = 0; n < n_img; ++n)
                     for (std::size_t i = 0; i < inner; ++i) {
                       const std::size_t k = idx(n, c, i);
                       dx[k] = dy[k] * gam * invstd[c];
                     }
                 }
               }
               accumulate_grad<T>(*gi, dgamma);
               accumulate_grad<T>(*bi, dbeta);
               if (xi->requires_grad) accumulate_grad<T>(*xi, dx);
             });
  }
  return y;
}

/// Rows of table[K,d] gathered by index into [N,d].
template <typename T>
Tensor<T> embedding(Graph<T>& g, const Tensor<T>& table, std::span<const std::size_t> indices) {
  detail::require(table.ndim() == 2, "embedding: table must be [K,d]");
  detail::require(!indices.empty(), "embedding: empty index list");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> ids(indices.begin(), indices.end());
  std::vector<T> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] >= rows) {
      throw std::out_of_range("embedding: index " + std::to_string(ids[n]) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[n] * d), d, out.begin() + static_cast<std::ptrdiff_t>(n * d));
  }
  Tensor<T> y({ids.size(), d}, std::move(out));
  if (g.any_requires_grad({&table})) {
    auto ti = table.impl(), yi = y.impl();
    g.record(OpKind::Embedding, {ti}, y, [ti, yi, ids = std::move(ids), d] {
      std::vector<T> buf(ti->data.size(), T(0));
      for (std::size_t n = 0; n < ids.size(); ++n)
        for (std::size_t j = 0; j < d; ++j) buf[ids[n] * d + j] += yi->grad[n * d + j];
      accumulate_grad<T>(*ti, buf);
    });
  }
  return y;
}

/// Concatenation along axis 1 of a[N,C1,...] and b[N,C2,...].
template <typename T>
Tensor<T> concat_channels(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.ndim() >= 2 && a.ndim() == b.ndim() && a.dim(0) == b.dim(0),
                  "concat_channels: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  for (std::size_t i = 2; i < a.ndim(); ++i) {
    detail::require(a.dim(i) == b.dim(i), "concat_channels: trailing extents differ " + to_string(a.shape()) +
                                              " vs " + to_string(b.shape()));
  }
  const std::size_t n_img = a.dim(0);
  const std::size_t sa = a.size() / n_img, sb = b.size() / n_img;
  std::vector<T> out(a.size() + b.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t n = 0; n < n_img; ++n) {
    std::copy_n(da.begin() + static_cast<std::ptrdiff_t>(n * sa), sa, out.begin() + static_cast<std::ptrdiff_t>(n * (sa + sb)));
    std::copy_n(db.begin() + static_cast<std::ptrdiff_t>(n * sb), sb, out.begin() + static_cast<std::ptrdiff_t>(n * (sa + sb) + sa));
  }
  Shape shape = a.shape();
  shape[1] += b.dim(1);
  Tensor<T> y(std::move(shape), std::move(out));
  if (g.any_requires_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::ConcatChannels, {ai, bi}, y, [ai, bi, yi, n_img, sa, sb] {
      std::vector<T> ga(ai->requires_grad ? n_img * sa : 0), gb(bi->requires_grad ? n_img * sb : 0);
      for (std::size_t n = 0; n < n_img; ++n) {
        const T* src = yi->grad.data() + n * (sa + sb);
        if (ai->requires_grad) std::copy_n(src, sa, ga.data() + n * sa);
        if (bi->requires_grad) std::copy_n(src + sa, sb, gb.data() + n * sb);
      }
      accumulate_grad<T>(*ai, ga);
      accumulate_grad<T>(*bi, gb);
    });
  }
  return y;
}

/// Adds b[C] or b[N,C] to x[N,C,...], broadcasting over the trailing extents.
template <typename T>
Tensor<T> bias_add(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& b) {
  detail::require(x.ndim() >= 2, "bias_add: expects x[N,C,...]");
  const std::size_t n_img = x.dim(0), channels = x.dim(1), inner = x.size() / (n_img * channels);
  const bool per_sample = b.ndim() == 2;
  detail::require((b.ndim() == 1 && b.dim(0) == channels) ||
                      (per_sample && b.dim(0) == n_img && b.dim(1) == channels),
                  "bias_add: bias " + to_string(b.shape()) + " does not broadcast onto " + to_string(x.shape()));
  std::vector<T> out(x.size());
  const auto xd = x.data(), bd = b.data();
  for (std::size_t n = 0; n < n_img; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const T bias = bd[per_sample ? n * channels + c : c];
      const std::size_t base = (n * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = xd[base + i] + bias;
    }
  Tensor<T> y(x.shape(), std::move(out));
  if (g.any_requires_grad({&x, &b})) {
    auto xi = x.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::BiasAdd, {xi, bi}, y, [xi, bi, yi, n_img, channels, inner, per_sample] {
      accumulate_grad<T>(*xi, yi->grad);
      if (!bi->requires_grad) return;
      std::vector<T> db(bi->data.size(), T(0));
      for (std::size_t n = 0; n < n_img; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
          T s = 0;
          const std::size_t base = (n * channels + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) s += yi->grad[base + i];
          db[per_sample ? n * channels + c : c] += s;
        }
      accumulate_grad<T>(*bi, db);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and row-wise ops

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  Tensor<T> y = Tensor<T>::scalar(s);
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Sum, {xi}, y, [xi, yi] {
      std::vector<T> buf(xi->data.size(), yi->grad[0]);
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  const T inv = T(1) / static_cast<T>(x.size());
  Tensor<T> y = Tensor<T>::scalar(s * inv);
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Mean, {xi}, y, [xi, yi, inv] {
      std::vector<T> buf(xi->data.size(), yi->grad[0] * inv);
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

/// Per-row squared Euclidean distance: out[n] = sum_j (a[n,j] - b[n,j])^2,
/// rows taken along axis 0.
template <typename T>
Tensor<T> sqdiff_rows(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sqdiff_rows");
  detail::require(a.ndim() >= 1, "sqdiff_rows: needs at least one axis");
  const std::size_t rows = a.dim(0), len = a.size() / rows;
  std::vector<T> out(rows);
  const auto da = a.data(), db = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < len; ++j) {
      const T d = da[r * len + j] - db[r * len + j];
      s += d * d;
    }
    out[r] = s;
  }
  Tensor<T> y({rows}, std::move(out));
  if (g.any_requires_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    g.record(OpKind::SqDiffRows, {ai, bi}, y, [ai, bi, yi, rows, len] {
      std::vector<T> buf(rows * len);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = r * len + j;
          buf[k] = T(2) * (ai->data[k] - bi->data[k]) * yi->grad[r];
        }
      accumulate_grad<T>(*ai, buf);
      if (bi->requires_grad) {
        for (auto& v : buf) v = -v;
        accumulate_grad<T>(*bi, buf);
      }
    });
  }
  return y;
}

/// Numerically stable log(sum(exp(x[n,:]))) per row of x[N,K].
template <typename T>
Tensor<T> logsumexp_rows(Graph<T>& g, const Tensor<T>& x) {
  detail::require(x.ndim() == 2, "logsumexp_rows: expects x[N,K]");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) m = std::max(m, xd[r * cols + j]);
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(xd[r * cols + j] - m);
    out[r] = m + std::log(s);
  }
  Tensor<T> y({rows}, std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::LogSumExpRows, {xi}, y, [xi, yi, rows, cols] {
      std::vector<T> buf(rows * cols);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j)
          buf[r * cols + j] = yi->grad[r] * std::exp(xi->data[r * cols + j] - yi->data[r]);
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

/// x[n, idx[n]] for each row of x[N,K].
template <typename T>
Tensor<T> select_cols(Graph<T>& g, const Tensor<T>& x, std::span<const std::size_t> idx) {
  detail::require(x.ndim() == 2 && idx.size() == x.dim(0), "select_cols: expects x[N,K] and N indices");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (ids[r] >= cols) throw std::out_of_range("select_cols: column index out of range");
    out[r] = x.data()[r * cols + ids[r]];
  }
  Tensor<T> y({rows}, std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::SelectCols, {xi}, y, [xi, yi, ids = std::move(ids), cols] {
      std::vector<T> buf(xi->data.size(), T(0));
      for (std::size_t r = 0; r < ids.size(); ++r) buf[r * cols + ids[r]] = yi->grad[r];
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

/// Row-wise z-score of p[N,K]: (p - mean) / (population std + guard). A row
/// whose entries are all identical maps to zeros with zero gradient.
template <typename T>
Tensor<T> zscore_rows(Graph<T>& g, const Tensor<T>& p, T guard = T(1e-12)) {
  detail::require(p.ndim() == 2 && p.dim(1) >= 2, "zscore_rows: expects p[N,K] with K >= 2");
  const std::size_t rows = p.dim(0), cols = p.dim(1);
  std::vector<T> out(rows * cols), centered(rows * cols), sigma(rows);
  std::vector<char> degenerate(rows, 0);
  const auto pd = p.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = pd.data() + r * cols;
    const auto [lo, hi] = std::minmax_element(row, row + cols);
    if (*lo == *hi) {
      degenerate[r] = 1;
      sigma[r] = 0;
      for (std::size_t j = 0; j < cols; ++j) centered[r * cols + j] = out[r * cols + j] = T(0);
      continue;
    }
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += row[j];
    const T mu = s / static_cast<T>(cols);
    T v = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const T d = row[j] - mu;
      centered[r * cols + j] = d;
      v += d * d;
    }
    sigma[r] = std::sqrt(v / static_cast<T>(cols));
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = centered[r * cols + j] / (sigma[r] + guard);
  }
  Tensor<T> y({rows, cols}, std::move(out));
  if (g.any_requires_grad({&p})) {
    auto pi = p.impl(), yi = y.impl();
    g.record(OpKind::ZScoreRows, {pi}, y,
             [pi, yi, rows, cols, guard, centered = std::move(centered), sigma = std::move(sigma),
              degenerate = std::move(degenerate)] {
               std::vector<T> buf(rows * cols, T(0));
               const T k = static_cast<T>(cols);
               for (std::size_t r = 0; r < rows; ++r) {
                 if (degenerate[r]) continue;
                 const T s = sigma[r], denom = s + guard;
                 T sum_g = 0, sum_gd = 0;
                 for (std::size_t j = 0; j < cols; ++j) {
                   sum_g += yi->grad[r * cols + j];
                   sum_gd += yi->grad[r * cols + j] * centered[r * cols + j];
                 }
                 for (std::size_t j = 0; j < cols; ++j) {
                   const T d = centered[r * cols + j];
                   buf[r * cols + j] = yi->grad[r * cols + j] / denom - sum_g / (k * denom) -
                                       d * sum_gd / (k * s * denom * denom);
                 }
               }
               accumulate_grad<T>(*pi, buf);
             });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Layout

/// Each row of x[N,...] repeated `times` consecutively: [N*times, ...].
template <typename T>
Tensor<T> repeat_rows(Graph<T>& g, const Tensor<T>& x, std::size_t times) {
  detail::require(x.ndim() >= 1 && times >= 1, "repeat_rows: needs a leading axis and times >= 1");
  const std::size_t rows = x.dim(0), len = x.size() / rows;
  std::vector<T> out(x.size() * times);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < times; ++t)
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(r * len), len,
                  out.begin() + static_cast<std::ptrdiff_t>((r * times + t) * len));
  Shape shape = x.shape();
  shape[0] *= times;
  Tensor<T> y(std::move(shape), std::move(out));
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::RepeatRows, {xi}, y, [xi, yi, rows, len, times] {
      std::vector<T> buf(rows * len, T(0));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < times; ++t)
          for (std::size_t j = 0; j < len; ++j) buf[r * len + j] += yi->grad[(r * times + t) * len + j];
      accumulate_grad<T>(*xi, buf);
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor<T> y(std::move(shape), x.values());
  if (g.any_requires_grad({&x})) {
    auto xi = x.impl(), yi = y.impl();
    g.record(OpKind::Reshape, {xi}, y, [xi, yi] { accumulate_grad<T>(*xi, yi->grad); });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Composites

/// Mean squared error over all elements.
template <typename T>
Tensor<T> mse(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  auto rows = sqdiff_rows(g, a, b);
  return scale(g, sum(g, rows), T(1) / static_cast<T>(a.size()));
}

/// Mean over rows of -log softmax(z)[label].
template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& z, std::span<const std::size_t> labels) {
  auto lse = logsumexp_rows(g, z);
  auto picked = select_cols(g, z, labels);
  return mean(g, sub(g, lse, picked));
}

// ---------------------------------------------------------------------------
// Uniform dispatch

template <typename T>
struct OpAttrs {
  T scalar = T(0);
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t times = 1;
  bool training = true;
  std::vector<std::size_t> indices;
  Shape shape;
};

/// Evaluates one primitive by kind. Input arity follows the typed functions;
/// batch_norm takes (x, gamma, beta, running_mean, running_var).
template <typename T>
Tensor<T> apply(Graph<T>& g, OpKind kind, std::span<const Tensor<T>> in, const OpAttrs<T>& at = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::Add: arity(2); return add(g, in[0], in[1]);
    case OpKind::Sub: arity(2); return sub(g, in[0], in[1]);
    case OpKind::Mul: arity(2); return mul(g, in[0], in[1]);
    case OpKind::Scale: arity(1); return scale(g, in[0], at.scalar);
    case OpKind::Shift: arity(1); return shift(g, in[0], at.scalar);
    case OpKind::MatMul: arity(2); return matmul(g, in[0], in[1]);
    case OpKind::MatMulNT: arity(2); return matmul_nt(g, in[0], in[1]);
    case OpKind::Conv2d: arity(2); return conv2d(g, in[0], in[1], at.stride, at.pad);
    case OpKind::Upsample2x: arity(1); return upsample2x(g, in[0]);
    case OpKind::Relu: arity(1); return relu(g, in[0]);
    case OpKind::Silu: arity(1); return silu(g, in[0]);
    case OpKind::BatchNorm: arity(5); return batch_norm(g, in[0], in[1], in[2], in[3], in[4], at.training);
    case OpKind::Embedding: arity(1); return embedding<T>(g, in[0], at.indices);
    case OpKind::ConcatChannels: arity(2); return concat_channels(g, in[0], in[1]);
    case OpKind::Sum: arity(1); return sum(g, in[0]);
    case OpKind::Mean: arity(1); return mean(g, in[0]);
    case OpKind::SqDiffRows: arity(2); return sqdiff_rows(g, in[0], in[1]);
    case OpKind::LogSumExpRows: arity(1); return logsumexp_rows(g, in[0]);
    case OpKind::BiasAdd: arity(2); return bias_add(g, in[0], in[1]);
    case OpKind::RepeatRows: arity(1); return repeat_rows(g, in[0], at.times);
    case OpKind::Reshape: arity(1); return reshape(g, in[0], at.shape);
    case OpKind::SelectCols: arity(1); return select_cols<T>(g, in[0], at.indices);
    case OpKind::ZScoreRows: arity(1); return zscore_rows(g, in[0]);
  }
  throw std::invalid_argument("apply: unknown op kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace noop::nd
