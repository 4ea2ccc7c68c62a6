#pragma once

// Gaussian smoothing, AUROC, and AUPRO.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pcsnet/tensor.hpp"

namespace pcsnet {

/// Normalized 1-D Gaussian of radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian sigma must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

/// Half-sample symmetric reflection (d c b a | a b c d), periodic with 2n.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - 1 - m);
}

/// Separable Gaussian blur over the last two axes with reflect padding.
template <typename T>
Tensor<T> gaussian_smooth(const Tensor<T>& map, double sigma) {
  if (map.rank() < 2) throw ShapeError("gaussian_smooth expects at least 2 dimensions");
  const auto kernel = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const std::size_t h = map.dim(map.rank() - 2), w = map.dim(map.rank() - 1);
  const std::size_t planes = map.size() / (h * w);
  Tensor<T> out(map.shape());
  std::vector<double> tmp(h * w);
  std::vector<std::size_t> xi(w * kernel.size()), yi(h * kernel.size());
  for (std::size_t x = 0; x < w; ++x)
    for (std::size_t t = 0; t < kernel.size(); ++t)
      xi[x * kernel.size() + t] = reflect_index(static_cast<std::ptrdiff_t>(x) + static_cast<std::ptrdiff_t>(t) - radius, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t t = 0; t < kernel.size(); ++t)
      yi[y * kernel.size() + t] = reflect_index(static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(t) - radius, h);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = map.data() + p * h * w;
    T* dst = out.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kernel.size(); ++t) acc += kernel[t] * src[y * w + xi[x * kernel.size() + t]];
        tmp[y * w + x] = acc;
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kernel.size(); ++t) acc += kernel[t] * tmp[yi[y * kernel.size() + t] * w + x];
        dst[y * w + x] = static_cast<T>(acc);
      }
  }
  return out;
}

/// Area under the ROC curve as the Mann-Whitney statistic,
/// (#(pos > neg) + 0.5 #(pos == neg)) / (#pos #neg), via one sort.
template <typename S>
double auroc(std::span<const S> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw std::invalid_argument("undefined AUROC: only one class present");
  // Count in half-units so the sum stays an exact integer.
  std::uint64_t half_units = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? p : n) += 1;
      ++j;
    }
    half_units += 2 * p * neg_below + p * n;
    neg_below += n;
    i = j;
  }
  return static_cast<double>(half_units) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

template <typename S>
double auroc(const std::vector<S>& scores, const std::vector<int>& labels) {
  return auroc(std::span<const S>(scores), std::span<const int>(labels));
}

/// 4-connected component labels of a binary mask (row-major h x w). Returns
/// the label per pixel (-1 for background) and the component sizes.
inline std::pair<std::vector<int>, std::vector<std::size_t>> label_regions(std::span<const std::uint8_t> mask,
                                                                           std::size_t h, std::size_t w) {
  std::vector<int> label(h * w, -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!mask[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t count = 0;
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++count;
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (mask[q] && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
    sizes.push_back(count);
  }
  return {std::move(label), std::move(sizes)};
}

struct ProPoint {
  double fpr;
  double pro;
};

/// Trapezoidal area under a (fpr, pro) curve, sorted by fpr, over
/// [0, fpr_limit], normalized by fpr_limit. The curve is linearly
/// interpolated at the limit.
inline double integrate_pro(const std::vector<ProPoint>& curve, double fpr_limit) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const auto& a = curve[i - 1];
    const auto& b = curve[i];
    if (a.fpr >= fpr_limit) break;
    if (b.fpr <= fpr_limit) {
      area += (b.fpr - a.fpr) * (a.pro + b.pro) * 0.5;
    } else {
      const double t = (fpr_limit - a.fpr) / (b.fpr - a.fpr);
      const double pro_at = a.pro + t * (b.pro - a.pro);
      area += (fpr_limit - a.fpr) * (a.pro + pro_at) * 0.5;
    }
  }
  return area / fpr_limit;
}

/// Flattened pixel pool for per-region-overlap evaluation.
struct ProInputs {
  std::vector<double> scores;
  std::vector<int> region;  // -1 for normal pixels
  std::vector<std::size_t> region_size;
  std::size_t normal_pixels = 0;
};

template <typename T>
ProInputs gather_pro_inputs(std::span<const Tensor<T>> maps, std::span<const Tensor<T>> masks) {
  if (maps.size() != masks.size()) throw std::invalid_argument("aupro: map and mask counts differ");
  ProInputs in;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    maps[i].require_same_shape(masks[i], "aupro");
    const std::size_t h = maps[i].dim(maps[i].rank() - 2), w = maps[i].dim(maps[i].rank() - 1);
    if (h * w != maps[i].size()) throw ShapeError("aupro expects single-channel maps");
    std::vector<std::uint8_t> bin(h * w);
    for (std::size_t p = 0; p < h * w; ++p) bin[p] = masks[i][p] > T{0.5} ? 1 : 0;
    auto [labels, sizes] = label_regions(bin, h, w);
    const int offset = static_cast<int>(in.region_size.size());
    for (std::size_t p = 0; p < h * w; ++p) {
      in.scores.push_back(static_cast<double>(maps[i][p]));
      in.region.push_back(labels[p] < 0 ? -1 : labels[p] + offset);
      if (labels[p] < 0) ++in.normal_pixels;
    }
    in.region_size.insert(in.region_size.end(), sizes.begin(), sizes.end());
  }
  if (in.region_size.empty()) throw std::invalid_argument("aupro: no anomalous regions in ground truth");
  if (in.normal_pixels == 0) throw std::invalid_argument("aupro: no normal pixels in ground truth");
  return in;
}

/// PRO curve from thresholds at the sorted unique scores (subsampled to at
/// most `max_levels`), each threshold t classifying score >= t as anomalous.
/// The curve starts at (0, 0) for a threshold above every score.
inline std::vector<ProPoint> pro_curve(const ProInputs& in, std::size_t max_levels = 1000) {
  const std::size_t n = in.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return in.scores[a] > in.scores[b]; });
  std::vector<double> levels;
  for (std::size_t i = 0; i < n; ++i)
    if (levels.empty() || in.scores[order[i]] != levels.back()) levels.push_back(in.scores[order[i]]);
  if (max_levels >= 2 && levels.size() > max_levels) {
    std::vector<double> picked(max_levels);
    const double step = static_cast<double>(levels.size() - 1) / static_cast<double>(max_levels - 1);
    for (std::size_t i = 0; i < max_levels; ++i)
      picked[i] = levels[static_cast<std::size_t>(std::llround(static_cast<double>(i) * step))];
    levels = std::move(picked);
  }
  const double regions = static_cast<double>(in.region_size.size());
  std::vector<ProPoint> curve{{0.0, 0.0}};
  std::size_t cursor = 0, fp = 0;
  double overlap_sum = 0.0;
  for (double t : levels) {
    while (cursor < n && in.scores[order[cursor]] >= t) {
      const int r = in.region[order[cursor]];
      if (r < 0)
        ++fp;
      else
        overlap_sum += 1.0 / static_cast<double>(in.region_size[static_cast<std::size_t>(r)]);
      ++cursor;
    }
    curve.push_back({static_cast<double>(fp) / static_cast<double>(in.normal_pixels), overlap_sum / regions});
  }
  return curve;
}

/// Normalized area under the per-region-overlap curve for FPR in [0, limit].
template <typename T>
double aupro(std::span<const Tensor<T>> maps, std::span<const Tensor<T>> masks, double fpr_limit = 0.3,
             std::size_t max_levels = 1000) {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw std::invalid_argument("aupro: fpr_limit must lie in (0, 1]");
  const auto in = gather_pro_inputs(maps, masks);
  return std::clamp(integrate_pro(pro_curve(in, max_levels), fpr_limit), 0.0, 1.0);
}

template <typename T>
double aupro(const std::vector<Tensor<T>>& maps, const std::vector<Tensor<T>>& masks, double fpr_limit = 0.3,
             std::size_t max_levels = 1000) {
  return aupro(std::span<const Tensor<T>>(maps), std::span<const Tensor<T>>(masks), fpr_limit, max_levels);
}

}  // namespace pcsnet
