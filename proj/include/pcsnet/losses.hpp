#pragma once

// Training objectives: normal-feature compacting (NFC), abnormal-feature
// separation (AFS), pixel-level disparity classification (PDC) over the
// top-P disparity pixels, segmentation (SEG), and their weighted total.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "pcsnet/pfa.hpp"

namespace pcsnet {

struct RadiusConfig {
  double quantile = 0.9;
  double alpha_fraction = 0.5;
  double floor = 1e-3;

  void validate() const {
    if (!(quantile > 0.0 && quantile < 1.0)) throw std::invalid_argument("radius quantile must lie in (0, 1)");
    if (!(alpha_fraction > 0.0)) throw std::invalid_argument("alpha_fraction must be positive");
  }
};

struct LossWeights {
  double lambda1 = 30.0;
  double lambda2 = 150.0;
};

enum class SegLossKind { mse, bce };

struct Radius {
  double r_sq;
  double alpha;
};

/// Nearest-rank quantile: the ceil(q*n)-th smallest value (1-based).
inline double nearest_rank_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty set");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

inline Radius radius_from_distances(std::vector<double> dists, const RadiusConfig& cfg) {
  double r_sq = nearest_rank_quantile(std::move(dists), cfg.quantile);
  if (!(r_sq > 0.0)) r_sq = cfg.floor;
  return {r_sq, cfg.alpha_fraction * std::sqrt(r_sq)};
}

/// r^2 is the q-quantile of the nearest-prototype squared distances over all
/// support patches; alpha = alpha_fraction * r. Falls back to the floor when
/// every distance is zero.
template <typename T>
Radius estimate_radius(std::span<const Tensor<T>> support, const PrototypeBank<T>& bank, const RadiusConfig& cfg) {
  cfg.validate();
  if (support.empty()) throw std::invalid_argument("estimate_radius: empty support set");
  PrototypeBank<T> nearest = bank;
  nearest.k = 1;
  std::vector<double> dists;
  for (const auto& f : support) {
    const auto table = search_neighbors(f, nearest);
    dists.insert(dists.end(), table.dist.begin(), table.dist.end());
  }
  return radius_from_distances(std::move(dists), cfg);
}

/// Mean over J*K of max(0, D - r^2). `dist` is the [1,K,H,W] similarity node.
template <typename T>
Var nfc_loss(Graph<T>& g, Var dist, double r_sq) {
  return g.mean(g.relu(g.add_scalar(dist, static_cast<T>(-r_sq))));
}

/// Mean over J*K of max(0, (r + alpha)^2 - D). When `patches` is non-empty
/// the mean runs over those locations only (the abnormal patches).
template <typename T>
Var afs_loss(Graph<T>& g, Var dist, double r_sq, double alpha, const std::vector<std::size_t>& patches = {}) {
  const double outer = std::pow(std::sqrt(r_sq) + alpha, 2);
  Var hinge = g.relu(g.add_scalar(g.scale(dist, T{-1}), static_cast<T>(outer)));
  if (patches.empty()) return g.mean(hinge);
  const auto& d = g.value(dist);
  const std::size_t k = d.c(), j = d.h() * d.w();
  std::vector<std::size_t> idx;
  idx.reserve(k * patches.size());
  for (std::size_t kk = 0; kk < k; ++kk)
    for (auto p : patches) {
      if (p >= j) throw std::out_of_range("afs_loss: patch index out of range");
      idx.push_back(kk * j + p);
    }
  return g.gather_mean(hinge, std::move(idx));
}

/// Flat locations where a [1,1,H,W] (or [1,H,W]) mask is set.
template <typename T>
std::vector<std::size_t> mask_locations(const Tensor<T>& mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] > T{0.5}) out.push_back(i);
  return out;
}

struct DisparitySelection {
  std::size_t p = 0;
  std::vector<std::size_t> indices;  // flat indices into the reduced map, largest first
};

/// Indices of the min(P, J) largest reduced-similarity entries; ties go to
/// the lower flat index.
template <typename T>
DisparitySelection select_top_disparity(const Tensor<T>& reduced, std::size_t p) {
  if (p < 1) throw std::invalid_argument("select_top_disparity: P must be >= 1");
  const std::size_t j = reduced.size();
  std::vector<std::size_t> order(j);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(p, j);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (reduced[a] != reduced[b]) return reduced[a] > reduced[b];
                      return a < b;
                    });
  order.resize(take);
  return {p, std::move(order)};
}

/// Mean of the reduced similarity over the selected pixels.
template <typename T>
Var gs_score(Graph<T>& g, Var reduced, const DisparitySelection& sel) {
  return g.gather_mean(reduced, sel.indices);
}

/// Calibrated logit of a disparity score: (G_s - r^2) / r^2.
template <typename T>
Var pdc_logit(Graph<T>& g, Var gs, double r_sq) {
  return g.scale(g.add_scalar(gs, static_cast<T>(-r_sq)), static_cast<T>(1.0 / r_sq));
}

/// Binary cross-entropy over the (normal, anomaly) pair of disparity scores.
template <typename T>
Var pdc_loss(Graph<T>& g, Var gs_normal, Var gs_abnormal, double r_sq) {
  Var ln = g.bce_with_logits(pdc_logit(g, gs_normal, r_sq), T{0});
  Var la = g.bce_with_logits(pdc_logit(g, gs_abnormal, r_sq), T{1});
  return g.scale(g.add(ln, la), T{0.5});
}

/// Per-sample PDC term for a single score and label.
template <typename T>
Var pdc_sample_loss(Graph<T>& g, Var gs, double r_sq, int label) {
  return g.bce_with_logits(pdc_logit(g, gs, r_sq), static_cast<T>(label));
}

/// (1/N) sum (M - M_g)^2, or mean binary cross-entropy when kind == bce.
template <typename T>
Var seg_loss(Graph<T>& g, Var map, const Tensor<T>& gt, SegLossKind kind = SegLossKind::mse) {
  g.value(map).require_same_shape(gt, "seg_loss");
  if (kind == SegLossKind::bce) return g.bce_mean(map, gt);
  return g.mse_mean(map, g.constant(gt));
}

/// nfc + afs + lambda1 * pdc + lambda2 * seg.
template <typename T>
Var total_loss(Graph<T>& g, Var nfc, Var afs, Var pdc, Var seg, const LossWeights& w) {
  Var pair = g.add(nfc, afs);
  return g.add(pair, g.add(g.scale(pdc, static_cast<T>(w.lambda1)), g.scale(seg, static_cast<T>(w.lambda2))));
}

/// Scalar recomputation of the total with the same association and
/// precision as `total_loss`, so logged totals can be checked exactly.
template <typename T = double>
T total_loss_value(T nfc, T afs, T pdc, T seg, const LossWeights& w) {
  return (nfc + afs) + (pdc * static_cast<T>(w.lambda1) + seg * static_cast<T>(w.lambda2));
}

}  // namespace pcsnet
