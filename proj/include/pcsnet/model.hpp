#pragma once

// Full PCSNet model: frozen extractor, adaptor, CAS head and the frozen
// prototype bank, plus checkpoint conversion and inference.

#include <json.hpp>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcsnet/cas.hpp"
#include "pcsnet/checkpoint.hpp"
#include "pcsnet/losses.hpp"
#include "pcsnet/pfa.hpp"
#include "pcsnet/synth.hpp"

namespace pcsnet {

enum class ImageScore { map_max, gs };

inline ImageScore parse_image_score(const std::string& s) {
  if (s == "max") return ImageScore::map_max;
  if (s == "gs") return ImageScore::gs;
  throw std::invalid_argument("unknown image score '" + s + "' (expected max or gs)");
}

inline const char* to_string(ImageScore s) { return s == ImageScore::map_max ? "max" : "gs"; }

inline SegLossKind parse_seg_loss(const std::string& s) {
  if (s == "mse") return SegLossKind::mse;
  if (s == "bce") return SegLossKind::bce;
  throw std::invalid_argument("unknown segmentation loss '" + s + "' (expected mse or bce)");
}

inline const char* to_string(SegLossKind k) { return k == SegLossKind::mse ? "mse" : "bce"; }

struct TrainConfig {
  std::size_t shots = 8;
  std::size_t epochs = 50;
  double lr_adaptor = 1e-3;
  double lr_cas = 1e-4;
  std::size_t k = 3;
  std::size_t p = 50;
  LossWeights weights;
  double sigma = 4.0;
  BlendMethod method = BlendMethod::nsa;
  SegLossKind seg_loss = SegLossKind::bce;
  RadiusConfig radius;
  std::uint64_t seed = 42;
  std::uint64_t extractor_seed = 0;
  double real_defect_frac = 0.0;
  bool train_cas = true;
  ImageScore image_score = ImageScore::map_max;

  void validate() const {
    if (shots < 1) throw std::invalid_argument("shots must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (!(lr_adaptor > 0.0) || !(lr_cas > 0.0)) throw std::invalid_argument("learning rates must be positive");
    if (k < 1 || p < 1) throw std::invalid_argument("K and P must be >= 1");
    if (weights.lambda1 < 0.0 || weights.lambda2 < 0.0) throw std::invalid_argument("loss weights must be >= 0");
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
    if (!(real_defect_frac >= 0.0 && real_defect_frac <= 1.0))
      throw std::invalid_argument("real-defect fraction must lie in [0, 1]");
    radius.validate();
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"shots", c.shots},
          {"epochs", c.epochs},
          {"lr_adaptor", c.lr_adaptor},
          {"lr_cas", c.lr_cas},
          {"k", c.k},
          {"p", c.p},
          {"lambda1", c.weights.lambda1},
          {"lambda2", c.weights.lambda2},
          {"sigma", c.sigma},
          {"method", to_string(c.method)},
          {"seg_loss", to_string(c.seg_loss)},
          {"radius_quantile", c.radius.quantile},
          {"alpha_fraction", c.radius.alpha_fraction},
          {"radius_floor", c.radius.floor},
          {"seed", c.seed},
          {"extractor_seed", c.extractor_seed},
          {"real_defect_frac", c.real_defect_frac},
          {"train_cas", c.train_cas},
          {"image_score", to_string(c.image_score)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.shots = j.at("shots").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.lr_adaptor = j.at("lr_adaptor").get<double>();
  c.lr_cas = j.at("lr_cas").get<double>();
  c.k = j.at("k").get<std::size_t>();
  c.p = j.at("p").get<std::size_t>();
  c.weights.lambda1 = j.at("lambda1").get<double>();
  c.weights.lambda2 = j.at("lambda2").get<double>();
  c.sigma = j.at("sigma").get<double>();
  c.method = parse_blend_method(j.at("method").get<std::string>());
  c.seg_loss = parse_seg_loss(j.at("seg_loss").get<std::string>());
  c.radius.quantile = j.at("radius_quantile").get<double>();
  c.radius.alpha_fraction = j.at("alpha_fraction").get<double>();
  c.radius.floor = j.at("radius_floor").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.extractor_seed = j.at("extractor_seed").get<std::uint64_t>();
  c.real_defect_frac = j.at("real_defect_frac").get<double>();
  c.train_cas = j.at("train_cas").get<bool>();
  c.image_score = parse_image_score(j.at("image_score").get<std::string>());
  return c;
}

/// Per-image inference output. Maps are [1, H, W] at image resolution.
template <typename T>
struct Inference {
  Tensor<T> map;             // smoothed CAS output
  double score = 0.0;        // max of `map`
  Tensor<T> sim_map;         // smoothed reduced similarity (CAS bypassed)
  double sim_score = 0.0;    // max of `sim_map`
  double gs = 0.0;           // top-P disparity score
};

template <typename T>
class Model {
 public:
  explicit Model(const TrainConfig& cfg)
      : config(cfg), extractor(cfg.extractor_seed), adaptor(derive_seed(cfg.seed, 0xA0)), cas(derive_seed(cfg.seed, 0xC0)) {}

  TrainConfig config;
  Extractor<T> extractor;
  Adaptor<T> adaptor;
  CasNet<T> cas;
  PrototypeBank<T> bank;
  std::string extra;  // free-form JSON echoed into the checkpoint (e.g. the loss trajectory)

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    nlohmann::ordered_json meta{{"config", to_json(config)}};
    if (!extra.empty()) meta["training"] = nlohmann::ordered_json::parse(extra);
    ck.config = meta.dump();
    for (const auto& [name, t] : extractor.weights()) ck.put(name, t);
    for (auto* p : adaptor.parameters()) ck.put(p->name, p->value);
    for (auto* p : cas.parameters()) ck.put(p->name, p->value);
    ck.put("bank.prototypes", bank.prototypes);
    ck.put("bank.k", Tensor<double>(Shape{1}, static_cast<double>(bank.k)));
    ck.put("bank.r_sq", Tensor<double>(Shape{1}, bank.r_sq));
    ck.put("bank.alpha", Tensor<double>(Shape{1}, bank.alpha));
    return ck;
  }

  static Model from_checkpoint(const Checkpoint& ck) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(ck.config);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    Model m(train_config_from_json(meta.at("config")));
    if (meta.contains("training")) m.extra = meta["training"].dump();
    std::map<std::string, Tensor<T>> ext;
    for (const auto& s : m.extractor.stages())
      for (const auto* p : {&s.weight, &s.bias}) ext[p->name] = ck.get<T>(p->name);
    m.extractor.load_weights(ext);
    auto load = [&](std::vector<Parameter<T>*> params) {
      for (auto* p : params) {
        auto t = ck.get<T>(p->name);
        p->value.require_same_shape(t, p->name.c_str());
        p->value = std::move(t);
        p->zero_grad();
      }
    };
    load(m.adaptor.parameters());
    load(m.cas.parameters());
    m.bank.prototypes = ck.get<T>("bank.prototypes");
    m.bank.k = static_cast<std::size_t>(ck.get<double>("bank.k").item());
    m.bank.r_sq = ck.get<double>("bank.r_sq").item();
    m.bank.alpha = ck.get<double>("bank.alpha").item();
    m.bank.validate();
    return m;
  }

  Tensor<T> features(const Tensor<T>& image) { return adaptor.adapt(extractor.extract(image)); }

  /// CAS input: log(1 + s / r^2) of the reduced similarity channel s.
  Var scaled_similarity(Graph<T>& g, Var reduced) const {
    return g.log1p(g.scale(reduced, static_cast<T>(1.0 / bank.r_sq)));
  }

  Inference<T> infer(const Tensor<T>& image) {
    bank.validate();
    const auto raw = extractor.extract(image);
    if (raw.h() != bank.prototypes.h() || raw.w() != bank.prototypes.w())
      throw ShapeError("infer: image size does not match the trained model");
    Graph<T> g;
    Var f = adaptor.forward(g, g.constant(raw));
    auto sim = similarity(g, f, bank);
    const auto sel = select_top_disparity(g.value(sim.reduced), config.p);
    const double gs = g.value(gs_score(g, sim.reduced, sel)).item();
    Var out = cas.forward(g, cas.multi_scale_aggregate(g, f), scaled_similarity(g, sim.reduced));
    const std::size_t factor = Extractor<T>::kStride;
    auto cas_map = postprocess_map(g.value(out), factor, config.sigma);
    auto sim_map = postprocess_map(g.value(sim.reduced), factor, config.sigma);
    const auto h = cas_map.map.h(), w = cas_map.map.w();
    return {cas_map.map.reshaped(Shape{1, h, w}), cas_map.score, sim_map.map.reshaped(Shape{1, h, w}), sim_map.score, gs};
  }
};

}  // namespace pcsnet
