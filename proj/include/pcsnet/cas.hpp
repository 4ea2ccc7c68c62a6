#pragma once

// Context-aware segmentation head: a three-level feature pyramid over the
// adapted features, conditioned on the similarity map at the finest level,
// fused top-down with residual refinement blocks.

#include <string>
#include <vector>

#include "pcsnet/layers.hpp"
#include "pcsnet/metrics.hpp"

namespace pcsnet {

/// x + conv_b(relu(conv_a(x))). With zero conv parameters this is the identity.
template <typename T>
struct RefineBlock {
  Conv2d<T> conv_a, conv_b;

  RefineBlock() = default;
  RefineBlock(const std::string& name, std::size_t width)
      : conv_a(name + ".conv_a", width, width, 3, 1), conv_b(name + ".conv_b", width, width, 3, 1) {}

  void init(Rng& rng) {
    conv_a.init(rng);
    conv_b.init(rng);
  }

  Var operator()(Graph<T>& g, Var x) { return g.add(x, conv_b(g, g.relu(conv_a(g, x)))); }

  void collect(std::vector<Parameter<T>*>& out) {
    conv_a.collect(out);
    conv_b.collect(out);
  }
};

struct Pyramid {
  Var fine;    // stride 1
  Var middle;  // stride 2
  Var coarse;  // stride 4
};

template <typename T>
class CasNet {
 public:
  CasNet(std::uint64_t seed = 0, std::size_t in_channels = 64, std::size_t width = 64)
      : down2_("cas.down2", in_channels, width, 3, 2),
        down3_("cas.down3", width, width, 3, 2),
        lateral_("cas.lateral", in_channels + 1, width, 1, 1),
        refine1_("cas.refine1", width),
        refine2_("cas.refine2", width),
        refine3_("cas.refine3", width),
        head_("cas.head", width, 1, 1, 1) {
    Rng rng(derive_seed(seed, 0xCA5));
    down2_.init(rng);
    down3_.init(rng);
    lateral_.init(rng);
    refine1_.init(rng);
    refine2_.init(rng);
    refine3_.init(rng);
    head_.init(rng);
  }

  Pyramid multi_scale_aggregate(Graph<T>& g, Var features) {
    const auto& f = g.value(features);
    if (f.rank() != 4 || f.h() % 4 || f.w() % 4)
      throw ShapeError("multi_scale_aggregate: spatial size must be divisible by 4, got " + shape_str(f.shape()));
    Var mid = g.relu(down2_(g, features));
    Var coarse = g.relu(down3_(g, mid));
    return {features, mid, coarse};
  }

  /// `similarity` is the reduced [1,1,H,W] similarity map, already scaled.
  Var forward(Graph<T>& g, const Pyramid& pyr, Var similarity) {
    const auto &fv = g.value(pyr.fine), &sv = g.value(similarity);
    if (sv.rank() != 4 || sv.c() != 1 || sv.h() != fv.h() || sv.w() != fv.w())
      throw ShapeError("cas_forward: similarity " + shape_str(sv.shape()) + " does not match features " +
                       shape_str(fv.shape()));
    Var lateral = lateral_(g, g.concat_channels(pyr.fine, similarity));
    Var t3 = refine3_(g, pyr.coarse);
    Var t2 = refine2_(g, g.add(pyr.middle, g.upsample(t3, 2)));
    Var t1 = refine1_(g, g.add(lateral, g.upsample(t2, 2)));
    return g.sigmoid(head_(g, t1));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    down2_.collect(out);
    down3_.collect(out);
    lateral_.collect(out);
    refine1_.collect(out);
    refine2_.collect(out);
    refine3_.collect(out);
    head_.collect(out);
    return out;
  }

  RefineBlock<T>& refine_block(int level) { return level == 1 ? refine1_ : level == 2 ? refine2_ : refine3_; }

 private:
  Conv2d<T> down2_, down3_, lateral_;
  RefineBlock<T> refine1_, refine2_, refine3_;
  Conv2d<T> head_;
};

/// Upsamples a [1,1,h,w] map by `factor` and smooths it; the image score is
/// the maximum of the result.
template <typename T>
struct PostProcessed {
  Tensor<T> map;
  double score;
};

template <typename T>
PostProcessed<T> postprocess_map(const Tensor<T>& raw, std::size_t factor, double sigma) {
  auto up = kernels::upsample_bilinear_forward(raw, factor);
  auto smooth = gaussian_smooth(up, sigma);
  const double score = static_cast<double>(smooth.max());
  return {std::move(smooth), score};
}

}  // namespace pcsnet
