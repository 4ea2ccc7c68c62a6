#pragma once

// Joint training of the adaptor and the CAS head on (normal, anomaly) pairs.

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__SSE2__)
#include <immintrin.h>
#endif

#include "pcsnet/adam.hpp"
#include "pcsnet/dataset.hpp"
#include "pcsnet/model.hpp"

namespace pcsnet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t pair = 0;
  double nfc = 0, afs = 0, pdc = 0, seg = 0, total = 0;
  double gs_normal = 0, gs_anomaly = 0;
  bool real_defect = false;
};

struct TrainLogEntry {
  std::size_t epoch = 0;
  double nfc = 0, afs = 0, pdc = 0, seg = 0, total = 0;
  double r_sq = 0;
  double wall_seconds = 0;
};

inline nlohmann::ordered_json to_json(const TrainLogEntry& e, bool with_time = false) {
  nlohmann::ordered_json j{{"epoch", e.epoch}, {"nfc", e.nfc}, {"afs", e.afs}, {"pdc", e.pdc},
                           {"seg", e.seg},     {"total", e.total}, {"r_sq", e.r_sq}};
  if (with_time) j["wall_seconds"] = e.wall_seconds;
  return j;
}

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<TrainLogEntry> log;
  std::vector<StepRecord> steps;
  std::vector<std::size_t> support;  // indices into the training split
};

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_epoch;
};

namespace detail {

// Flushes subnormals to zero on this thread while alive. Tiny Adam moments
// otherwise fall into the subnormal range and slow every later op.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

template <typename T>
Tensor<T> feature_mask(const Tensor<T>& mask, std::size_t stride) {
  return kernels::max_pool(as_batch(mask), stride);
}

template <typename T>
void require_finite_step(const StepRecord& s) {
  for (double v : {s.nfc, s.afs, s.pdc, s.seg, s.total})
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite loss at epoch " << s.epoch << ", pair " << s.pair << ": nfc=" << s.nfc << " afs=" << s.afs
         << " pdc=" << s.pdc << " seg=" << s.seg << " total=" << s.total;
      throw TrainingError(os.str());
    }
}

}  // namespace detail

/// Trains a model on `cfg.shots` normals drawn from `data.train`.
template <typename T = float>
TrainResult<T> train(const TrainConfig& cfg, const Dataset& data, const TrainHooks& hooks = {}) {
  cfg.validate();
  const detail::FlushDenormals ftz;
  if (data.train.empty()) throw std::invalid_argument("train: dataset has no training images");
  if (cfg.shots > data.train.size())
    throw std::invalid_argument("train: " + std::to_string(cfg.shots) + " shots requested but only " +
                                std::to_string(data.train.size()) + " training normals are available");
  if (cfg.real_defect_frac > 0.0 && data.real_defects.empty())
    throw std::invalid_argument("train: real-defect fraction is set but the dataset has no train/real_defect pairs");

  TrainResult<T> res{Model<T>(cfg), {}, {}, select_shots(data.train.size(), cfg.shots, cfg.seed)};
  auto& model = res.model;
  const std::size_t n = cfg.shots, stride = Extractor<T>::kStride;

  std::vector<Tensor<T>> images, raw;
  for (auto idx : res.support) {
    images.push_back(data.train[idx].image.template cast<T>());
    raw.push_back(model.extractor.extract(images.back()));
  }
  std::vector<Tensor<T>> real_images, real_masks;
  for (const auto& s : data.real_defects) {
    real_images.push_back(s.image.template cast<T>());
    real_masks.push_back(s.mask.template cast<T>());
  }

  auto adaptor_params = model.adaptor.parameters();
  auto cas_params = model.cas.parameters();
  AdamState<T> adam_adaptor, adam_cas;
  SynthOptions synth_opt;
  synth_opt.method = cfg.method;
  const Tensor<T> zero_mask(Shape{1, 1, raw.front().h(), raw.front().w()});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    // Prototype refresh from the current adaptor; no gradient reaches the bank.
    std::vector<Tensor<T>> feats;
    for (const auto& r : raw) feats.push_back(model.adaptor.adapt(r));
    const double r_sq = model.bank.r_sq, alpha = model.bank.alpha;
    model.bank = build_prototypes<T>(feats, cfg.k, r_sq, alpha);
    if (epoch == 0) {
      const auto radius = estimate_radius<T>(feats, model.bank, cfg.radius);
      model.bank.r_sq = radius.r_sq;
      model.bank.alpha = radius.alpha;
    }
    model.bank.validate();
    const double rs = model.bank.r_sq, al = model.bank.alpha;

    TrainLogEntry entry;
    entry.epoch = epoch;
    entry.r_sq = rs;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t pair_seed = derive_seed(cfg.seed, epoch + 1, i);
      Rng pick(derive_seed(pair_seed, 0x4EA1));
      const bool use_real = cfg.real_defect_frac > 0.0 && pick.bernoulli(cfg.real_defect_frac);
      Tensor<T> anomaly, anomaly_mask;
      if (use_real) {
        const auto r = static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(real_images.size()) - 1));
        anomaly = real_images[r];
        anomaly_mask = real_masks[r];
      } else {
        auto s = synthesize<T>(images[i], images, pair_seed, synth_opt);
        anomaly = std::move(s.image);
        anomaly_mask = std::move(s.mask);
      }

      Graph<T> g;
      Var fn = model.adaptor.forward(g, g.constant(raw[i]));
      Var fa = model.adaptor.forward(g, g.constant(model.extractor.extract(anomaly)));
      auto sn = similarity(g, fn, model.bank);
      auto sa = similarity(g, fa, model.bank);
      Var nfc = nfc_loss(g, sn.values, rs);
      const auto gt_anomaly = detail::feature_mask(anomaly_mask, stride);
      Var afs = afs_loss(g, sa.values, rs, al, mask_locations(gt_anomaly));
      Var gsn = gs_score(g, sn.reduced, select_top_disparity(g.value(sn.reduced), cfg.p));
      Var gsa = gs_score(g, sa.reduced, select_top_disparity(g.value(sa.reduced), cfg.p));
      Var pdc = pdc_loss(g, gsn, gsa, rs);
      Var mn = model.cas.forward(g, model.cas.multi_scale_aggregate(g, fn), model.scaled_similarity(g, sn.reduced));
      Var ma = model.cas.forward(g, model.cas.multi_scale_aggregate(g, fa), model.scaled_similarity(g, sa.reduced));
      Var seg = g.scale(g.add(seg_loss(g, mn, zero_mask, cfg.seg_loss),
                              seg_loss(g, ma, gt_anomaly, cfg.seg_loss)),
                        T{0.5});
      Var total = total_loss(g, nfc, afs, pdc, seg, cfg.weights);

      StepRecord rec{epoch,
                     i,
                     g.value(nfc).item(),
                     g.value(afs).item(),
                     g.value(pdc).item(),
                     g.value(seg).item(),
                     g.value(total).item(),
                     g.value(gsn).item(),
                     g.value(gsa).item(),
                     use_real};
      detail::require_finite_step<T>(rec);

      zero_grads<T>(adaptor_params);
      zero_grads<T>(cas_params);
      g.backward(total);
      adam_step<T>(adaptor_params, adam_adaptor, cfg.lr_adaptor);
      if (cfg.train_cas) adam_step<T>(cas_params, adam_cas, cfg.lr_cas);

      entry.nfc += rec.nfc / double(n);
      entry.afs += rec.afs / double(n);
      entry.pdc += rec.pdc / double(n);
      entry.seg += rec.seg / double(n);
      entry.total += rec.total / double(n);
      res.steps.push_back(rec);
    }
    entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(entry);
    if (hooks.on_epoch) hooks.on_epoch(entry);
  }

  // Final bank from the trained adaptor; r and alpha stay at their epoch-0 values.
  std::vector<Tensor<T>> feats;
  for (const auto& r : raw) feats.push_back(model.adaptor.adapt(r));
  model.bank = build_prototypes<T>(feats, cfg.k, model.bank.r_sq, model.bank.alpha);
  model.bank.validate();

  nlohmann::ordered_json extra;
  extra["support"] = res.support;
  auto traj = nlohmann::ordered_json::array();
  for (const auto& e : res.log) traj.push_back(to_json(e));
  extra["loss_trajectory"] = std::move(traj);
  model.extra = extra.dump();
  return res;
}

}  // namespace pcsnet
