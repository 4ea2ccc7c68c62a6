#pragma once

// Raw forward/backward kernels over contiguous buffers. The autodiff graph
// wraps these; nothing here allocates graph state.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <vector>

#include "pcsnet/tensor.hpp"

namespace pcsnet::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;

  static ConvGeometry make(std::size_t cin, std::size_t h, std::size_t w, std::size_t k, std::size_t stride) {
    const std::size_t pad = k / 2;
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;
    return {cin, h, w, k, stride, pad, ho, wo};
  }
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return ho * wo; }
  bool direct() const { return k == 1 && stride == 1; }
};

// col[(ci*k + ky)*k + kx][oy*wo + ox] = x[ci][oy*s + ky - pad][ox*s + kx - pad], zero outside.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const auto hp = static_cast<std::ptrdiff_t>(g.h), wp = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* plane = x + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * g.wo;
          if (iy < 0 || iy >= hp) {
            std::fill(out, out + g.wo, T{0});
            continue;
          }
          const T* src = plane + iy * wp;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            out[ox] = (ix < 0 || ix >= wp) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const auto hp = static_cast<std::ptrdiff_t>(g.h), wp = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* plane = dx + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= hp) continue;
          T* dst = plane + iy * wp;
          const T* in = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < wp) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

inline void check_conv_args(const Shape& x, const Shape& w, const Shape& b, std::size_t stride) {
  if (x.size() != 4 || w.size() != 4) throw ShapeError("conv2d expects 4-D input and weight");
  if (w[2] != w[3] || (w[2] != 1 && w[2] != 3))
    throw std::invalid_argument("conv2d: unsupported kernel size " + std::to_string(w[2]));
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: unsupported stride " + std::to_string(stride));
  if (w[1] != x[1])
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(x[1]) + ", weight expects " +
                     std::to_string(w[1]));
  if (b.size() != 1 || b[0] != w[0]) throw ShapeError("conv2d: bias shape " + shape_str(b));
}

/// Same-padded cross-correlation plus bias.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride) {
  check_conv_args(x.shape(), w.shape(), b.shape(), stride);
  const std::size_t batch = x.n(), cout = w.n();
  const auto g = ConvGeometry::make(x.c(), x.h(), x.w(), w.h(), stride);
  Tensor<T> y(Shape{batch, cout, g.ho, g.wo});
  AlignedVector<T> col(g.direct() ? 0 : g.rows() * g.cols());
  ConstMapMat<T> wm(w.data(), cout, g.rows());
  for (std::size_t n = 0; n < batch; ++n) {
    const T* xin = x.data() + n * g.cin * g.h * g.w;
    if (!g.direct()) im2col(xin, g, col.data());
    ConstMapMat<T> cm(g.direct() ? xin : col.data(), g.rows(), g.cols());
    MapMat<T> ym(y.data() + n * cout * g.cols(), cout, g.cols());
    ym.noalias() = wm * cm;
    for (std::size_t co = 0; co < cout; ++co) ym.row(co).array() += b[co];
  }
  return y;
}

/// Accumulates parameter gradients into dw/db and, when dx is non-null, the
/// input gradient.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t batch = x.n(), cout = w.n();
  const auto g = ConvGeometry::make(x.c(), x.h(), x.w(), w.h(), stride);
  AlignedVector<T> col(g.direct() ? 0 : g.rows() * g.cols());
  AlignedVector<T> dcol(dx && !g.direct() ? g.rows() * g.cols() : 0);
  ConstMapMat<T> wm(w.data(), cout, g.rows());
  for (std::size_t n = 0; n < batch; ++n) {
    const T* xin = x.data() + n * g.cin * g.h * g.w;
    ConstMapMat<T> dym(dy.data() + n * cout * g.cols(), cout, g.cols());
    if (dw) {
      if (!g.direct()) im2col(xin, g, col.data());
      ConstMapMat<T> cm(g.direct() ? xin : col.data(), g.rows(), g.cols());
      MapMat<T> dwm(dw->data(), cout, g.rows());
      dwm.noalias() += dym * cm.transpose();
    }
    if (db) {
      for (std::size_t co = 0; co < cout; ++co) (*db)[co] += dym.row(co).sum();
    }
    if (dx) {
      T* dxin = dx->data() + n * g.cin * g.h * g.w;
      if (g.direct()) {
        MapMat<T> dxm(dxin, g.rows(), g.cols());
        dxm.noalias() += wm.transpose() * dym;
      } else {
        MapMat<T> dcm(dcol.data(), g.rows(), g.cols());
        dcm.noalias() = wm.transpose() * dym;
        col2im_add(dcol.data(), g, dxin);
      }
    }
  }
}

/// Source coordinate of output index `i` for an upsampling by `factor`, with
/// half-pixel centres and border clamping.
struct BilinearTap {
  std::size_t i0, i1;
  double frac;
};

inline std::vector<BilinearTap> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<BilinearTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double s = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}

template <typename T>
Tensor<T> upsample_bilinear_forward(const Tensor<T>& x, std::size_t factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  if (factor == 1) return x;
  const std::size_t planes = x.n() * x.c(), h = x.h(), w = x.w();
  const auto ty = bilinear_taps(h, factor), tx = bilinear_taps(w, factor);
  const std::size_t ho = h * factor, wo = w * factor;
  Tensor<T> y(Shape{x.n(), x.c(), ho, wo});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = y.data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const auto& a = ty[oy];
      const T fy = static_cast<T>(a.frac);
      const T* r0 = src + a.i0 * w;
      const T* r1 = src + a.i1 * w;
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& b = tx[ox];
        const T fx = static_cast<T>(b.frac);
        const T top = r0[b.i0] * (T{1} - fx) + r0[b.i1] * fx;
        const T bot = r1[b.i0] * (T{1} - fx) + r1[b.i1] * fx;
        dst[oy * wo + ox] = top * (T{1} - fy) + bot * fy;
      }
    }
  }
  return y;
}

template <typename T>
void upsample_bilinear_backward(const Tensor<T>& dy, std::size_t factor, Tensor<T>& dx) {
  if (factor == 1) {
    dx += dy;
    return;
  }
  const std::size_t planes = dx.n() * dx.c(), h = dx.h(), w = dx.w();
  const auto ty = bilinear_taps(h, factor), tx = bilinear_taps(w, factor);
  const std::size_t ho = h * factor, wo = w * factor;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = dy.data() + p * ho * wo;
    T* d = dx.data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const auto& a = ty[oy];
      const T fy = static_cast<T>(a.frac);
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& b = tx[ox];
        const T fx = static_cast<T>(b.frac);
        const T v = g[oy * wo + ox];
        d[a.i0 * w + b.i0] += v * (T{1} - fy) * (T{1} - fx);
        d[a.i0 * w + b.i1] += v * (T{1} - fy) * fx;
        d[a.i1 * w + b.i0] += v * fy * (T{1} - fx);
        d[a.i1 * w + b.i1] += v * fy * fx;
      }
    }
  }
}

/// Normalized coordinate of index i along an axis of length n: 2i/(n-1) - 1,
/// or 0 when n == 1.
template <typename T>
T normalized_coord(std::size_t i, std::size_t n) {
  if (n <= 1) return T{0};
  return static_cast<T>(2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0);
}

template <typename T>
Tensor<T> coordconv_forward(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("coordconv expects 4-D input");
  const std::size_t c = x.c(), h = x.h(), w = x.w(), hw = h * w;
  Tensor<T> y(Shape{x.n(), c + 2, h, w});
  for (std::size_t n = 0; n < x.n(); ++n) {
    std::copy_n(x.data() + n * c * hw, c * hw, y.data() + n * (c + 2) * hw);
    T* xs = y.data() + (n * (c + 2) + c) * hw;
    T* ys = xs + hw;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col) {
        xs[r * w + col] = normalized_coord<T>(col, w);
        ys[r * w + col] = normalized_coord<T>(r, h);
      }
  }
  return y;
}

/// Max-pool by an integer factor (non-overlapping windows).
template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, std::size_t factor) {
  if (x.h() % factor || x.w() % factor) throw ShapeError("max_pool: size not divisible by factor");
  const std::size_t ho = x.h() / factor, wo = x.w() / factor;
  Tensor<T> y(Shape{x.n(), x.c(), ho, wo}, -std::numeric_limits<T>::infinity());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t ch = 0; ch < x.c(); ++ch)
      for (std::size_t r = 0; r < x.h(); ++r)
        for (std::size_t col = 0; col < x.w(); ++col) {
          T& m = y.at(n, ch, r / factor, col / factor);
          m = std::max(m, x.at(n, ch, r, col));
        }
  return y;
}

}  // namespace pcsnet::kernels
