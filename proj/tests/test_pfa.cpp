#include "support.hpp"

using namespace pcsnet;
using namespace pcsnet::testing;

namespace {

// Full sort of (distance, index) pairs over every prototype.
std::vector<std::pair<double, std::size_t>> brute_force_nn(const std::vector<double>& q, const Tensor<double>& protos) {
  const std::size_t c = protos.c(), j = protos.h() * protos.w();
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t p = 0; p < j; ++p) {
    double d = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) d += (q[ch] - protos[ch * j + p]) * (q[ch] - protos[ch * j + p]);
    all.emplace_back(d, p);
  }
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<double> column(const Tensor<double>& f, std::size_t p) {
  const std::size_t c = f.c(), j = f.h() * f.w();
  std::vector<double> q(c);
  for (std::size_t ch = 0; ch < c; ++ch) q[ch] = f[ch * j + p];
  return q;
}

}  // namespace

TEST(Extractor, ShapeDeterminismAndSizeCheck) {
  Rng rng(20);
  const auto img = random_tensor_f(Shape{3, 64, 48}, rng, 0.0, 1.0);
  const Extractor<float> a(3), b(3), c(4);
  const auto fa = a.extract(img);
  EXPECT_EQ(fa.shape(), (Shape{1, 96, 16, 12}));
  EXPECT_EQ(fa.vec(), b.extract(img).vec());
  EXPECT_NE(fa.vec(), c.extract(img).vec());
  EXPECT_THROW(a.extract(Tensor<float>(Shape{3, 20, 16})), std::invalid_argument);
}

TEST(Extractor, MatchesLayerByLayerReference) {
  Rng rng(21);
  const auto img = random_tensor(Shape{3, 16, 16}, rng, 0.0, 1.0);
  const Extractor<double> e(5);
  const auto& st = e.stages();
  auto layer = [](const Tensor<double>& x, const Conv2d<double>& conv) {
    auto y = kernels::conv2d_forward(x, conv.weight.value, conv.bias.value, 2);
    for (auto& v : y.vec()) v = std::max(v, 0.0);
    return y;
  };
  const auto s2 = layer(layer(img.reshaped(Shape{1, 3, 16, 16}), st[0]), st[1]);
  const auto s3 = kernels::upsample_bilinear_forward(layer(s2, st[2]), 2);
  const auto out = e.extract(img);
  const std::size_t hw = 16;
  for (std::size_t c = 0; c < 96; ++c) {
    const double* src = c < 32 ? s2.data() + c * hw : s3.data() + (c - 32) * hw;
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += src[i] / hw;
    for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean) / hw;
    for (std::size_t i = 0; i < hw; ++i) EXPECT_NEAR(out[c * hw + i], (src[i] - mean) / std::sqrt(var + 1e-6), 1e-9);
  }
}

TEST(Extractor, ChannelsAreStandardized) {
  Rng rng(29);
  const Extractor<double> e(6);
  for (const auto& img : {Tensor<double>(Shape{3, 16, 16}), random_tensor(Shape{3, 16, 16}, rng, 0.0, 1.0)}) {
    const auto out = e.extract(img);
    EXPECT_EQ(out.vec(), e.extract(img).vec());
    for (std::size_t c = 0; c < 96; ++c) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < 16; ++i) {
        ASSERT_TRUE(std::isfinite(out[c * 16 + i]));
        mean += out[c * 16 + i] / 16.0;
        sq += out[c * 16 + i] * out[c * 16 + i] / 16.0;
      }
      EXPECT_NEAR(mean, 0.0, 1e-9);
      EXPECT_LE(sq, 1.0 + 1e-9);
    }
  }
}

TEST(Adaptor, ShapeAndZeroWeights) {
  Rng rng(22);
  Adaptor<double> a(1);
  const auto raw = random_tensor(Shape{1, 96, 4, 5}, rng);
  EXPECT_EQ(a.adapt(raw).shape(), (Shape{1, 64, 4, 5}));
  for (auto* p : a.parameters()) p->value.fill(0.0);
  const auto zero = a.adapt(raw);
  for (double v : zero.vec()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(a.adapt(Tensor<double>(Shape{1, 95, 4, 5})), ShapeError);
}

TEST(Adaptor, MatchesLayerByLayerReference) {
  Rng rng(23);
  Adaptor<double> a(2, 8);
  const auto raw = random_tensor(Shape{1, 96, 3, 4}, rng);
  auto ps = a.parameters();
  auto x = kernels::coordconv_forward(raw);
  for (std::size_t l = 0; l < 3; ++l) {
    x = kernels::conv2d_forward(x, ps[2 * l]->value, ps[2 * l + 1]->value, 1);
    if (l < 2)
      for (auto& v : x.vec()) v = std::max(v, 0.0);
  }
  const auto got = a.adapt(raw);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], x[i], 1e-12);
}

TEST(Prototypes, MeansAndPermutationInvariance) {
  Rng rng(24);
  std::vector<Tensor<double>> maps;
  for (int i = 0; i < 8; ++i) maps.push_back(random_tensor(Shape{1, 4, 3, 3}, rng));
  const auto bank = build_prototypes<double>(maps, 2);
  for (std::size_t i = 0; i < bank.prototypes.size(); ++i) {
    double acc = 0.0;
    for (const auto& m : maps) acc += m[i];
    EXPECT_NEAR(bank.prototypes[i], acc / 8.0, 1e-12);
  }
  auto shuffled = maps;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[1], shuffled[5]);
  EXPECT_EQ(build_prototypes<double>(shuffled, 2).prototypes.vec(), bank.prototypes.vec());
  const auto one = build_prototypes<double>(std::vector<Tensor<double>>{maps[0]});
  EXPECT_EQ(one.prototypes.vec(), maps[0].vec());
  const auto two = build_prototypes<double>(std::vector<Tensor<double>>{maps[0], maps[1]});
  for (std::size_t i = 0; i < two.prototypes.size(); ++i) EXPECT_NEAR(two.prototypes[i], (maps[0][i] + maps[1][i]) / 2, 1e-15);
  EXPECT_THROW(build_prototypes<double>(std::vector<Tensor<double>>{}), std::invalid_argument);
  EXPECT_THROW(build_prototypes<double>(std::vector<Tensor<double>>{maps[0], Tensor<double>(Shape{1, 4, 3, 2})}), ShapeError);
}

TEST(Neighbors, MatchBruteForce) {
  Rng rng(25);
  PrototypeBank<double> bank;
  bank.prototypes = random_tensor(Shape{1, 6, 10, 10}, rng);
  for (std::size_t k : {1u, 3u, 7u}) {
    bank.k = k;
    for (int t = 0; t < 30; ++t) {
      std::vector<double> q(6);
      for (auto& v : q) v = rng.uniform(-1, 1);
      const auto got = topk_neighbors<double>(q, bank);
      const auto want = brute_force_nn(q, bank.prototypes);
      ASSERT_EQ(got.size(), k);
      for (std::size_t i = 0; i < k; ++i) {
        EXPECT_EQ(got[i].index, want[i].second);
        EXPECT_NEAR(got[i].dist, want[i].first, 1e-12);
      }
    }
  }
}

TEST(Neighbors, ExactMatchTiesAndExhaustive) {
  Rng rng(26);
  PrototypeBank<double> bank;
  bank.prototypes = random_tensor(Shape{1, 3, 2, 4}, rng);
  bank.k = 1;
  const auto q = column(bank.prototypes, 5);
  const auto hit = topk_neighbors<double>(q, bank);
  EXPECT_EQ(hit[0].index, 5u);
  EXPECT_EQ(hit[0].dist, 0.0);
  bank.k = 8;
  const auto all = topk_neighbors<double>(q, bank);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_LE(all[i - 1].dist, all[i].dist);
  // Duplicate prototypes: the lower index wins.
  PrototypeBank<double> dup;
  dup.prototypes = Tensor<double>(Shape{1, 1, 1, 4}, std::vector<double>{2, 1, 1, 1});
  dup.k = 2;
  const auto tie = topk_neighbors<double>(std::vector<double>{1.0}, dup);
  EXPECT_EQ(tie[0].index, 1u);
  EXPECT_EQ(tie[1].index, 2u);
  dup.k = 5;
  EXPECT_THROW(topk_neighbors<double>(std::vector<double>{1.0}, dup), std::invalid_argument);
}

TEST(Similarity, SelfDistanceAndBruteForce) {
  Rng rng(27);
  const auto f = random_tensor(Shape{1, 5, 4, 4}, rng);
  auto bank = build_prototypes<double>(std::vector<Tensor<double>>{f}, 1);
  const auto self = similarity_map(f, bank);
  for (double v : self.values.vec()) EXPECT_EQ(v, 0.0);
  bank.k = 3;
  Tensor<double> shifted = f;
  const std::size_t j = 16;
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t p = 0; p < j; ++p) shifted[c * j + p] += 0.1 * double(c + 1);
  const auto s = similarity_map(shifted, bank);
  ASSERT_EQ(s.values.shape(), (Shape{1, 3, 4, 4}));
  for (std::size_t p = 0; p < j; ++p) {
    const auto want = brute_force_nn(column(shifted, p), bank.prototypes);
    double mean = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(s.values[k * j + p], want[k].first, 1e-12);
      mean += want[k].first / 3.0;
    }
    EXPECT_NEAR(s.reduced[p], mean, 1e-12);
  }
}

TEST(Similarity, LargerKKeepsLeadingDistances) {
  Rng rng(28);
  PrototypeBank<double> bank;
  bank.prototypes = random_tensor(Shape{1, 4, 3, 3}, rng);
  const auto f = random_tensor(Shape{1, 4, 3, 3}, rng);
  bank.k = 2;
  const auto small = similarity_map(f, bank).values;
  bank.k = 5;
  const auto large = similarity_map(f, bank).values;
  for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i], large[i]);
}

TEST(Radius, NearestRankQuantile) {
  RadiusConfig cfg;
  EXPECT_EQ(radius_from_distances({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, cfg).r_sq, 9.0);
  EXPECT_EQ(radius_from_distances({0, 0, 0}, cfg).r_sq, 1e-3);
  cfg.quantile = 0.5;
  const auto r = radius_from_distances({4, 2}, cfg);
  EXPECT_EQ(r.r_sq, 2.0);
  EXPECT_DOUBLE_EQ(r.alpha, 0.5 * std::sqrt(2.0));
  cfg.quantile = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
