#pragma once

// Prototypical feature adaptation: frozen extractor, trainable adaptor,
// prototype bank with top-k matching, and the similarity map.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcsnet/layers.hpp"

namespace pcsnet {

/// Adds a leading batch axis to a [C,H,W] tensor; 4-D input passes through.
template <typename T>
Tensor<T> as_batch(const Tensor<T>& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return x.reshaped(Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  throw ShapeError("expected a 3-D or 4-D tensor, got " + shape_str(x.shape()));
}

/// Shifts and scales every channel of a [1,C,H,W] tensor in place to zero
/// spatial mean and unit spatial variance.
template <typename T>
void standardize_channels(Tensor<T>& x, double eps = 1e-6) {
  const std::size_t hw = x.h() * x.w();
  for (std::size_t c = 0; c < x.n() * x.c(); ++c) {
    T* p = x.data() + c * hw;
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += p[i];
    mean /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
    const double inv = 1.0 / std::sqrt(var / static_cast<double>(hw) + eps);
    for (std::size_t i = 0; i < hw; ++i) p[i] = static_cast<T>((p[i] - mean) * inv);
  }
}

/// Fixed, seeded three-stage CNN standing in for a pretrained backbone.
/// Output: stage-2 features concatenated with stage-3 features upsampled x2,
/// each channel standardized over the image, i.e. [1, 96, H/4, W/4].
template <typename T>
class Extractor {
 public:
  static constexpr std::size_t kOutChannels = 96;
  static constexpr std::size_t kStride = 4;

  explicit Extractor(std::uint64_t seed = 0) : seed_(seed) {
    stages_[0] = Conv2d<T>("extractor.stage1", 3, 16, 3, 2);
    stages_[1] = Conv2d<T>("extractor.stage2", 16, 32, 3, 2);
    stages_[2] = Conv2d<T>("extractor.stage3", 32, 64, 3, 2);
    Rng rng(derive_seed(seed, 0xE7));
    for (auto& s : stages_) s.init(rng);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  Tensor<T> extract(const Tensor<T>& image) const {
    const auto x = as_batch(image);
    if (x.c() != 3) throw ShapeError("extract: expected 3 channels, got " + std::to_string(x.c()));
    if (x.h() % 8 || x.w() % 8 || x.h() == 0 || x.w() == 0)
      throw std::invalid_argument("extract: image size " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                                  " is not divisible by 8");
    const auto s1 = relu(stages_[0].apply(x));
    const auto s2 = relu(stages_[1].apply(s1));
    const auto s3 = relu(stages_[2].apply(s2));
    const auto up = kernels::upsample_bilinear_forward(s3, 2);
    Graph<T> g;
    auto out = g.value(g.concat_channels(g.constant(s2), g.constant(up)));
    standardize_channels(out);
    return out;
  }

  /// Named weight tensors in checkpoint order.
  std::map<std::string, Tensor<T>> weights() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& s : stages_) {
      out[s.weight.name] = s.weight.value;
      out[s.bias.name] = s.bias.value;
    }
    return out;
  }

  /// Replaces weights from a named table (e.g. an exported backbone). Every
  /// stage tensor must be present with the expected shape.
  void load_weights(const std::map<std::string, Tensor<T>>& table) {
    for (auto& s : stages_) {
      for (auto* p : {&s.weight, &s.bias}) {
        auto it = table.find(p->name);
        if (it == table.end()) throw std::runtime_error("extractor weights missing tensor '" + p->name + "'");
        p->value.require_same_shape(it->second, p->name.c_str());
        p->value = it->second;
      }
    }
  }

  const std::array<Conv2d<T>, 3>& stages() const noexcept { return stages_; }

 private:
  std::uint64_t seed_;
  std::array<Conv2d<T>, 3> stages_;
};

/// CoordConv followed by three 1x1 convolutions (98->64->64->64), ReLU
/// between layers.
template <typename T>
class Adaptor {
 public:
  static constexpr std::size_t kInChannels = Extractor<T>::kOutChannels;

  explicit Adaptor(std::uint64_t seed = 0, std::size_t width = 64)
      : conv1_("adaptor.conv1", kInChannels + 2, width, 1, 1),
        conv2_("adaptor.conv2", width, width, 1, 1),
        conv3_("adaptor.conv3", width, width, 1, 1) {
    Rng rng(derive_seed(seed, 0xAD));
    conv1_.init(rng);
    conv2_.init(rng);
    conv3_.init(rng);
  }

  std::size_t out_channels() const { return conv3_.out_channels(); }

  Var forward(Graph<T>& g, Var raw) {
    if (g.value(raw).c() != kInChannels)
      throw ShapeError("adapt: expected " + std::to_string(kInChannels) + " channels, got " +
                       std::to_string(g.value(raw).c()));
    Var x = g.coordconv(raw);
    x = g.relu(conv1_(g, x));
    x = g.relu(conv2_(g, x));
    return conv3_(g, x);
  }

  /// Graph-free forward pass for inference.
  Tensor<T> adapt(const Tensor<T>& raw) {
    Graph<T> g;
    return g.value(forward(g, g.constant(as_batch(raw))));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    conv1_.collect(out);
    conv2_.collect(out);
    conv3_.collect(out);
    return out;
  }

 private:
  Conv2d<T> conv1_, conv2_, conv3_;
};

/// Per-location mean of the support feature maps plus the matching radius.
template <typename T>
struct PrototypeBank {
  Tensor<T> prototypes;  // [1, C, H, W]; location j = row * W + col
  std::size_t k = 3;
  double r_sq = 1.0;
  double alpha = 0.5;

  std::size_t channels() const { return prototypes.c(); }
  std::size_t count() const { return prototypes.h() * prototypes.w(); }

  void validate() const {
    if (prototypes.rank() != 4 || prototypes.n() != 1 || count() == 0) throw std::invalid_argument("prototype bank is empty");
    if (k < 1 || k > count()) throw std::invalid_argument("prototype bank: K must lie in [1, J]");
    if (!(r_sq > 0.0) || !(alpha > 0.0)) throw std::invalid_argument("prototype bank: r_sq and alpha must be positive");
    check_finite(prototypes, "prototype bank");
  }
};

/// Per-location arithmetic mean of the support maps. Each mean is summed in
/// sorted order, so the result does not depend on support ordering.
template <typename T>
PrototypeBank<T> build_prototypes(std::span<const Tensor<T>> support, std::size_t k = 3, double r_sq = 1.0,
                                  double alpha = 0.5) {
  if (support.empty()) throw std::invalid_argument("build_prototypes: empty support set");
  const Shape shape = as_batch(support.front()).shape();
  for (const auto& s : support)
    if (as_batch(s).shape() != shape) throw ShapeError("build_prototypes: support maps differ in shape");
  Tensor<T> proto(shape);
  std::vector<T> column(support.size());
  for (std::size_t i = 0; i < proto.size(); ++i) {
    for (std::size_t n = 0; n < support.size(); ++n) column[n] = support[n][i];
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (T v : column) acc += v;
    proto[i] = static_cast<T>(acc / static_cast<double>(support.size()));
  }
  PrototypeBank<T> bank{std::move(proto), k, r_sq, alpha};
  return bank;
}

template <typename T>
struct Neighbor {
  std::size_t index;
  T dist;
};

/// The K nearest prototypes of every location of a feature map. Entry
/// [k * J + j] is the k-th nearest (0-based) for location j.
template <typename T>
struct NeighborTable {
  std::size_t k = 0;
  std::size_t locations = 0;
  std::vector<std::size_t> index;
  std::vector<T> dist;
};

namespace detail {

// Keeps the `k` smallest (dist, index) pairs seen, sorted ascending. Scanning
// in increasing index with strict comparison gives lower-index tie-breaking.
template <typename T>
void scan_topk(const T* dist, std::size_t count, std::size_t k, Neighbor<T>* best) {
  std::size_t filled = 0;
  for (std::size_t p = 0; p < count; ++p) {
    const T d = dist[p];
    if (filled == k && !(d < best[k - 1].dist)) continue;
    std::size_t pos = filled < k ? filled++ : k - 1;
    while (pos > 0 && d < best[pos - 1].dist) {
      best[pos] = best[pos - 1];
      --pos;
    }
    best[pos] = {p, d};
  }
}

}  // namespace detail

/// K nearest prototypes to one query vector, searched over all J
/// prototypes by squared Euclidean distance.
template <typename T>
std::vector<Neighbor<T>> topk_neighbors(std::span<const T> query, const PrototypeBank<T>& bank) {
  if (bank.prototypes.empty() || bank.count() == 0) throw std::invalid_argument("topk_neighbors: empty bank");
  const std::size_t c = bank.channels(), j = bank.count();
  if (query.size() != c) throw ShapeError("topk_neighbors: query dimension mismatch");
  if (bank.k < 1 || bank.k > j) throw std::invalid_argument("topk_neighbors: K must lie in [1, J]");
  std::vector<T> dist(j, T{0});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T q = query[ch];
    const T* row = bank.prototypes.data() + ch * j;
    for (std::size_t p = 0; p < j; ++p) {
      const T d = q - row[p];
      dist[p] += d * d;
    }
  }
  std::vector<Neighbor<T>> best(bank.k);
  detail::scan_topk(dist.data(), j, bank.k, best.data());
  return best;
}

template <typename T>
NeighborTable<T> search_neighbors(const Tensor<T>& features, const PrototypeBank<T>& bank) {
  const auto f = as_batch(features);
  if (f.c() != bank.channels()) throw ShapeError("search_neighbors: channel mismatch with bank");
  const std::size_t c = f.c(), j = f.h() * f.w(), k = bank.k;
  NeighborTable<T> table{k, j, std::vector<std::size_t>(k * j), std::vector<T>(k * j)};
  std::vector<T> query(c);
  for (std::size_t p = 0; p < j; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) query[ch] = f[ch * j + p];
    const auto best = topk_neighbors<T>(query, bank);
    for (std::size_t kk = 0; kk < k; ++kk) {
      table.index[kk * j + p] = best[kk].index;
      table.dist[kk * j + p] = best[kk].dist;
    }
  }
  return table;
}

/// Squared distances of every location to its K nearest prototypes
/// ([1,K,H,W]) and their mean over K ([1,1,H,W]).
template <typename T>
struct SimilarityMap {
  Tensor<T> values;
  Tensor<T> reduced;
};

template <typename T>
struct SimilarityVars {
  Var values;
  Var reduced;
  NeighborTable<T> neighbors;
};

/// Differentiable similarity map. Neighbor indices are fixed by the forward
/// search; gradients flow into the features only.
template <typename T>
SimilarityVars<T> similarity(Graph<T>& g, Var features, const PrototypeBank<T>& bank) {
  const auto& f = g.value(features);
  if (f.rank() != 4 || f.h() * f.w() != bank.count() || f.c() != bank.channels())
    throw ShapeError("similarity_map: features " + shape_str(f.shape()) + " do not match bank " +
                     shape_str(bank.prototypes.shape()));
  auto table = search_neighbors(f, bank);
  Var values = g.sq_dist_to_refs(features, bank.prototypes, table.index, bank.k);
  Var reduced = g.mean_channels(values);
  return {values, reduced, std::move(table)};
}

template <typename T>
SimilarityMap<T> similarity_map(const Tensor<T>& features, const PrototypeBank<T>& bank) {
  Graph<T> g;
  auto s = similarity(g, g.constant(as_batch(features)), bank);
  return {g.value(s.values), g.value(s.reduced)};
}

}  // namespace pcsnet
