#pragma once

// Synthetic anomalies: rectangular patches cut from pool images and placed
// into a normal image, either by Poisson image editing (gradient-domain,
// seamless) or by direct replacement (CutPaste).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcsnet/rng.hpp"
#include "pcsnet/tensor.hpp"

namespace pcsnet {

struct Rect {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct PatchSpec {
  std::size_t source = 0;  // index into the pool
  Rect src;
  std::size_t dst_x = 0, dst_y = 0;
  std::uint64_t seed = 0;
  friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

struct PatchBounds {
  double min_frac = 0.10;
  double max_frac = 0.35;
};

enum class BlendMethod { nsa, cutpaste };

inline BlendMethod parse_blend_method(const std::string& s) {
  if (s == "nsa") return BlendMethod::nsa;
  if (s == "cutpaste") return BlendMethod::cutpaste;
  throw std::invalid_argument("unknown synthesis method '" + s + "' (expected nsa or cutpaste)");
}

inline const char* to_string(BlendMethod m) { return m == BlendMethod::nsa ? "nsa" : "cutpaste"; }

inline std::pair<std::size_t, std::size_t> side_range(std::size_t side, const PatchBounds& b) {
  const auto lo = static_cast<std::size_t>(std::ceil(b.min_frac * static_cast<double>(side)));
  const auto hi = static_cast<std::size_t>(std::floor(b.max_frac * static_cast<double>(side)));
  return {std::max<std::size_t>(lo, 2), hi};
}

/// Deterministic patch placement. Side lengths lie in
/// [min_frac, max_frac] of the corresponding image side.
inline std::vector<PatchSpec> sample_patch_specs(std::uint64_t seed, std::size_t n_patches, std::size_t height,
                                                 std::size_t width, std::size_t pool_size = 1,
                                                 const PatchBounds& bounds = {}) {
  if (pool_size == 0) throw std::invalid_argument("sample_patch_specs: empty pool");
  const auto [wlo, whi] = side_range(width, bounds);
  const auto [hlo, hhi] = side_range(height, bounds);
  if (whi < wlo || hhi < hlo)
    throw std::invalid_argument("sample_patch_specs: image " + std::to_string(height) + "x" + std::to_string(width) +
                                " is smaller than the minimum patch");
  std::vector<PatchSpec> specs;
  for (std::size_t i = 0; i < n_patches; ++i) {
    PatchSpec s;
    s.seed = derive_seed(seed, i);
    Rng rng(s.seed);
    s.source = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool_size) - 1));
    s.src.w = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(wlo), static_cast<std::int64_t>(whi)));
    s.src.h = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(hlo), static_cast<std::int64_t>(hhi)));
    s.src.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - s.src.w)));
    s.src.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - s.src.h)));
    s.dst_x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - s.src.w)));
    s.dst_y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - s.src.h)));
    specs.push_back(s);
  }
  return specs;
}

/// Copies a [C, h, w] region out of a [C, H, W] image.
template <typename T>
Tensor<T> crop(const Tensor<T>& img, const Rect& r) {
  const std::size_t c = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (r.x + r.w > W || r.y + r.h > H) throw std::out_of_range("crop rectangle outside image");
  Tensor<T> out(Shape{c, r.h, r.w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < r.h; ++y)
      std::copy_n(img.data() + (ch * H + r.y + y) * W + r.x, r.w, out.data() + (ch * r.h + y) * r.w);
  return out;
}

struct PoissonOptions {
  double tolerance = 1e-6;
  std::size_t max_iterations = 10000;
  bool clamp = true;
};

template <typename T>
struct BlendResult {
  Tensor<T> image;
  bool converged = true;
  std::size_t iterations = 0;
  double residual = 0.0;  // max-norm of the interior Laplacian mismatch
};

namespace detail {

struct BlendRegion {
  std::size_t C, H, W, top, left, h, w;

  template <typename T>
  static BlendRegion make(const Tensor<T>& dst, const Tensor<T>& patch, const Tensor<T>& mask, std::size_t top,
                          std::size_t left) {
    if (dst.rank() != 3 || patch.rank() != 3) throw ShapeError("blend expects [C,H,W] images");
    const std::size_t h = patch.dim(1), w = patch.dim(2);
    if (patch.dim(0) != dst.dim(0)) throw ShapeError("blend: channel mismatch between patch and destination");
    if (mask.size() != h * w) throw ShapeError("blend: mask is not congruent with the patch");
    if (top + h > dst.dim(1) || left + w > dst.dim(2)) throw std::out_of_range("blend: patch outside destination");
    return {dst.dim(0), dst.dim(1), dst.dim(2), top, left, h, w};
  }

  bool inside_patch(std::ptrdiff_t y, std::ptrdiff_t x) const {
    return y >= static_cast<std::ptrdiff_t>(top) && y < static_cast<std::ptrdiff_t>(top + h) &&
           x >= static_cast<std::ptrdiff_t>(left) && x < static_cast<std::ptrdiff_t>(left + w);
  }
};

}  // namespace detail

/// Gradient-domain blend of `patch` into `dst` at (top, left). Pixels with
/// mask = 1 are unknowns whose 4-neighbour Laplacian matches the patch's;
/// every other pixel keeps its destination value and acts as the Dirichlet
/// boundary. Solved per channel in double precision by successive
/// over-relaxation until the residual max-norm reaches the tolerance.
template <typename T>
BlendResult<T> poisson_blend(const Tensor<T>& dst, const Tensor<T>& patch, const Tensor<T>& mask, std::size_t top,
                             std::size_t left, const PoissonOptions& opt = {}) {
  const auto r = detail::BlendRegion::make(dst, patch, mask, top, left);
  BlendResult<T> result{dst, true, 0, 0.0};
  std::vector<std::size_t> unknowns;  // flat image index (y * W + x)
  for (std::size_t y = 0; y < r.h; ++y)
    for (std::size_t x = 0; x < r.w; ++x)
      if (mask[y * r.w + x] > T{0.5}) unknowns.push_back((top + y) * r.W + left + x);
  if (unknowns.empty()) return result;
  if (unknowns.size() == r.H * r.W) throw std::invalid_argument("poisson_blend: mask covers the whole image");

  const double omega = 2.0 / (1.0 + std::sin(std::numbers::pi / static_cast<double>(std::max(r.h, r.w) + 1)));
  struct Stencil {
    std::size_t self;
    std::size_t nb[4];
    std::uint8_t count;
  };
  std::vector<Stencil> stencil(unknowns.size());
  for (std::size_t i = 0; i < unknowns.size(); ++i) {
    const std::size_t u = unknowns[i], y = u / r.W, x = u % r.W;
    auto& st = stencil[i];
    st.self = u;
    st.count = 0;
    if (y > 0) st.nb[st.count++] = u - r.W;
    if (y + 1 < r.H) st.nb[st.count++] = u + r.W;
    if (x > 0) st.nb[st.count++] = u - 1;
    if (x + 1 < r.W) st.nb[st.count++] = u + 1;
  }
  std::vector<double> f(r.H * r.W), g(r.h * r.w), guide(unknowns.size());

  for (std::size_t ch = 0; ch < r.C; ++ch) {
    const T* d = dst.data() + ch * r.H * r.W;
    const T* s = patch.data() + ch * r.h * r.w;
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = d[i];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = s[i];
    for (std::size_t i = 0; i < unknowns.size(); ++i) {
      const auto u = unknowns[i];
      f[u] = g[(u / r.W - top) * r.w + (u % r.W - left)];
      double lap = 0.0;
      const std::size_t y = u / r.W, x = u % r.W, py = y - top, px = x - left;
      for (std::uint8_t k = 0; k < stencil[i].count; ++k) {
        const std::size_t q = stencil[i].nb[k], qy = q / r.W, qx = q % r.W;
        if (r.inside_patch(static_cast<std::ptrdiff_t>(qy), static_cast<std::ptrdiff_t>(qx)))
          lap += g[py * r.w + px] - g[(qy - top) * r.w + (qx - left)];
      }
      guide[i] = lap;
    }

    auto residual = [&](std::size_t i) {
      const auto& st = stencil[i];
      double acc = static_cast<double>(st.count) * f[st.self];
      for (std::uint8_t k = 0; k < st.count; ++k) acc -= f[st.nb[k]];
      return acc - guide[i];
    };
    auto max_residual = [&] {
      double m = 0.0;
      for (std::size_t i = 0; i < unknowns.size(); ++i) m = std::max(m, std::abs(residual(i)));
      return m;
    };

    std::size_t it = 0;
    double res = max_residual();
    while (res > opt.tolerance && it < opt.max_iterations) {
      for (std::size_t i = 0; i < unknowns.size(); ++i)
        f[stencil[i].self] -= omega * residual(i) / static_cast<double>(stencil[i].count);
      ++it;
      if (it % 8 == 0 || it == opt.max_iterations) res = max_residual();
    }
    res = max_residual();
    result.iterations = std::max(result.iterations, it);
    result.residual = std::max(result.residual, res);
    if (res > opt.tolerance) result.converged = false;

    T* out = result.image.data() + ch * r.H * r.W;
    for (auto u : unknowns) {
      const double v = opt.clamp ? std::clamp(f[u], 0.0, 1.0) : f[u];
      out[u] = static_cast<T>(v);
    }
  }
  return result;
}

/// Direct replacement of the masked pixels by the patch.
template <typename T>
Tensor<T> cutpaste_blend(const Tensor<T>& dst, const Tensor<T>& patch, const Tensor<T>& mask, std::size_t top,
                         std::size_t left) {
  const auto r = detail::BlendRegion::make(dst, patch, mask, top, left);
  Tensor<T> out = dst;
  for (std::size_t ch = 0; ch < r.C; ++ch)
    for (std::size_t y = 0; y < r.h; ++y)
      for (std::size_t x = 0; x < r.w; ++x)
        if (mask[y * r.w + x] > T{0.5}) out[(ch * r.H + top + y) * r.W + left + x] = patch[(ch * r.h + y) * r.w + x];
  return out;
}

struct PatchRecord {
  PatchSpec spec;
  bool converged = true;
  std::size_t iterations = 0;
};

template <typename T>
struct SyntheticSample {
  Tensor<T> image;  // [3, H, W]
  Tensor<T> mask;   // [1, H, W], binary
  int label = 1;
  std::vector<PatchRecord> provenance;

  bool converged() const {
    return std::all_of(provenance.begin(), provenance.end(), [](const PatchRecord& p) { return p.converged; });
  }
};

struct SynthOptions {
  BlendMethod method = BlendMethod::nsa;
  PatchBounds bounds;
  std::size_t min_patches = 1;
  std::size_t max_patches = 3;
  PoissonOptions poisson;
};

/// Applies explicit patch specs in order.
template <typename T>
SyntheticSample<T> synthesize_with(const Tensor<T>& normal, std::span<const Tensor<T>> pool,
                                   const std::vector<PatchSpec>& specs, const SynthOptions& opt = {}) {
  if (pool.empty()) throw std::invalid_argument("synthesize: empty source pool");
  if (normal.rank() != 3) throw ShapeError("synthesize expects a [C,H,W] image");
  const std::size_t H = normal.dim(1), W = normal.dim(2);
  SyntheticSample<T> out{normal, Tensor<T>(Shape{1, H, W}), 1, {}};
  for (const auto& spec : specs) {
    const auto& src = pool[spec.source];
    if (src.shape() != normal.shape()) throw ShapeError("synthesize: pool image shape differs from the target");
    const auto patch = crop(src, spec.src);
    const Tensor<T> region_mask(Shape{1, spec.src.h, spec.src.w}, T{1});
    PatchRecord rec{spec, true, 0};
    if (opt.method == BlendMethod::nsa) {
      auto res = poisson_blend(out.image, patch, region_mask, spec.dst_y, spec.dst_x, opt.poisson);
      out.image = std::move(res.image);
      rec.converged = res.converged;
      rec.iterations = res.iterations;
    } else {
      out.image = cutpaste_blend(out.image, patch, region_mask, spec.dst_y, spec.dst_x);
    }
    for (std::size_t y = 0; y < spec.src.h; ++y)
      for (std::size_t x = 0; x < spec.src.w; ++x) out.mask[(spec.dst_y + y) * W + spec.dst_x + x] = T{1};
    out.provenance.push_back(rec);
  }
  return out;
}

/// Samples 1-3 patches from `pool` and blends them into `normal`.
template <typename T>
SyntheticSample<T> synthesize(const Tensor<T>& normal, std::span<const Tensor<T>> pool, std::uint64_t seed,
                              const SynthOptions& opt = {}) {
  if (pool.empty()) throw std::invalid_argument("synthesize: empty source pool");
  Rng rng(derive_seed(seed, 0x5A));
  const auto n = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(opt.min_patches), static_cast<std::int64_t>(opt.max_patches)));
  const auto specs = sample_patch_specs(derive_seed(seed, 0x5B), n, normal.dim(1), normal.dim(2), pool.size(), opt.bounds);
  return synthesize_with(normal, pool, specs, opt);
}

}  // namespace pcsnet
