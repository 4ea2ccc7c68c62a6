#pragma once

// Test-split evaluation and the report document.

#include <json.hpp>

#include <stdexcept>
#include <string>
#include <vector>

#include "pcsnet/dataset.hpp"
#include "pcsnet/metrics.hpp"
#include "pcsnet/model.hpp"
#include "pcsnet/parallel.hpp"

namespace pcsnet {

/// Which map drives the pixel metrics and the max image score.
enum class MapSource { cas, similarity };

struct EvalOptions {
  ImageScore image_score = ImageScore::map_max;
  MapSource map_source = MapSource::cas;
  double fpr_limit = 0.3;
  std::size_t max_levels = 1000;
};

struct EvalReport {
  double image_auroc = 0.0;
  double pixel_auroc = 0.0;
  double aupro = 0.0;
  std::vector<std::string> names;
  std::vector<double> scores;
  std::vector<double> gs;
  std::vector<int> labels;
  nlohmann::ordered_json config;

  double mean_score(int label) const { return mean_of(scores, label); }
  double mean_gs(int label) const { return mean_of(gs, label); }

 private:
  double mean_of(const std::vector<double>& v, int label) const {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (labels[i] == label) acc += v[i], ++n;
    return n ? acc / double(n) : 0.0;
  }
};

/// Runs inference over `test` and aggregates image AUROC, pooled pixel
/// AUROC, and AUPRO over the anomalous images. `maps_out`, when given,
/// receives the per-image maps in test order.
template <typename T>
EvalReport evaluate(Model<T>& model, const std::vector<Sample>& test, const EvalOptions& opt = {},
                    std::vector<Tensor<T>>* maps_out = nullptr) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<Inference<T>> out(test.size());
  parallel_for(test.size(), [&](std::size_t i) { out[i] = model.infer(test[i].image.template cast<T>()); });

  EvalReport rep;
  std::vector<float> pixel_scores;
  std::vector<int> pixel_labels;
  std::vector<Tensor<T>> anomalous_maps, anomalous_masks;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test[i];
    const auto& map = opt.map_source == MapSource::cas ? out[i].map : out[i].sim_map;
    const double max_score = opt.map_source == MapSource::cas ? out[i].score : out[i].sim_score;
    rep.names.push_back(s.name);
    rep.labels.push_back(s.label);
    rep.gs.push_back(out[i].gs);
    rep.scores.push_back(opt.image_score == ImageScore::gs ? out[i].gs : max_score);
    for (std::size_t p = 0; p < map.size(); ++p) {
      pixel_scores.push_back(static_cast<float>(map[p]));
      pixel_labels.push_back(s.mask[p] > 0.5f ? 1 : 0);
    }
    if (s.label == 1) {
      anomalous_maps.push_back(map);
      anomalous_masks.push_back(s.mask.template cast<T>());
    }
  }
  rep.image_auroc = auroc(rep.scores, rep.labels);
  rep.pixel_auroc = auroc(pixel_scores, pixel_labels);
  rep.aupro = aupro(anomalous_maps, anomalous_masks, opt.fpr_limit, opt.max_levels);
  rep.config = {{"shots", model.config.shots},
                {"seed", model.config.seed},
                {"epochs", model.config.epochs},
                {"method", to_string(model.config.method)},
                {"image_score", to_string(opt.image_score)},
                {"map_source", opt.map_source == MapSource::cas ? "cas" : "similarity"},
                {"fpr_limit", opt.fpr_limit}};
  if (maps_out) {
    maps_out->clear();
    for (auto& o : out) maps_out->push_back(std::move(opt.map_source == MapSource::cas ? o.map : o.sim_map));
  }
  return rep;
}

/// Structured report: metrics, config echo, loss trajectory and per-image
/// scores. Output is a deterministic function of its inputs.
inline std::string report_document(const EvalReport& rep, const std::string& training_json = {}) {
  nlohmann::ordered_json j;
  j["image_auroc"] = rep.image_auroc;
  j["pixel_auroc"] = rep.pixel_auroc;
  j["aupro"] = rep.aupro;
  for (const auto& [k, v] : rep.config.items()) j[k] = v;
  auto traj = nlohmann::ordered_json::array();
  if (!training_json.empty()) {
    const auto t = nlohmann::ordered_json::parse(training_json);
    if (t.contains("loss_trajectory")) traj = t["loss_trajectory"];
  }
  j["loss_trajectory"] = std::move(traj);
  auto images = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < rep.names.size(); ++i)
    images.push_back({{"name", rep.names[i]}, {"label", rep.labels[i]}, {"score", rep.scores[i]}, {"gs", rep.gs[i]}});
  j["images"] = std::move(images);
  return j.dump(2) + "\n";
}

}  // namespace pcsnet
