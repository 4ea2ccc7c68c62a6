#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "pcsnet/pcsnet.hpp"

namespace pcsnet::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor<float> random_tensor_f(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return random_tensor(std::move(shape), rng, lo, hi).cast<float>();
}

/// |a - n| / max(|a|, |n|), with an absolute floor so entries that are zero
/// in both count as exact.
inline double relative_error(double analytic, double numeric, double floor = 1e-9) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max({std::abs(analytic), std::abs(numeric)});
  if (scale < floor) return 0.0;
  return diff / scale;
}

using LossBuilder = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
  double relu_margin = 0.0;  // smallest |input| over all relu nodes of the unperturbed graph
};

/// Smallest distance of any relu input to the kink at zero; infinity when the
/// graph has no relu.
inline double relu_margin(const Graph<double>& g) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& n = g.node(Var{i});
    if (n.op != "relu") continue;
    for (double v : g.node(Var{n.inputs[0]}).value.vec()) m = std::min(m, std::abs(v));
  }
  return m;
}

/// Compares one analytic derivative against central differences of
/// `at(delta)`, the loss with the probed coordinate shifted by delta.
template <typename Eval>
void probe(GradCheck& out, double analytic, Eval at, double h) {
  const double numeric = (at(h) - at(-h)) / (2.0 * h);
  out.max_rel = std::max(out.max_rel, relative_error(analytic, numeric));
  ++out.checked;
}

/// Central finite differences (step h) against reverse-mode gradients for
/// every input tensor. At most `max_entries` coordinates per input are
/// probed, chosen by a fixed stride.
inline GradCheck check_gradients(const std::vector<Tensor<double>>& inputs, const LossBuilder& build, double h = 1e-4,
                                 std::size_t max_entries = 64) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
    Graph<double> g;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(g.input(x));
    return g.value(build(g, vars)).item();
  };
  Graph<double> g;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(g.input(x));
  g.backward(build(g, vars));
  GradCheck out;
  out.relu_margin = relu_margin(g);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto analytic = g.grad(vars[t]);
    const std::size_t n = inputs[t].size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
    for (std::size_t i = 0; i < n; i += stride) {
      probe(
          out, analytic[i],
          [&](double delta) {
            auto xs = inputs;
            xs[t][i] += delta;
            return evaluate(xs);
          },
          h);
    }
  }
  return out;
}

/// Same check over module parameters: the loss is rebuilt from scratch on a
/// fresh graph for every evaluation.
template <typename Loss>
GradCheck check_parameter_gradients(const std::vector<Parameter<double>*>& params, Loss loss, double h = 1e-4,
                                    std::size_t per_tensor = 6) {
  for (auto* p : params) p->zero_grad();
  GradCheck out;
  {
    Graph<double> g;
    g.backward(loss(g));
    out.relu_margin = relu_margin(g);
  }
  for (auto* p : params) {
    const auto analytic = p->grad;
    const std::size_t stride = std::max<std::size_t>(1, p->value.size() / per_tensor);
    for (std::size_t i = 0; i < p->value.size(); i += stride) {
      const double orig = p->value[i];
      probe(
          out, analytic[i],
          [&](double delta) {
            p->value[i] = orig + delta;
            Graph<double> g;
            const double v = g.value(loss(g)).item();
            p->value[i] = orig;
            return v;
          },
          h);
    }
  }
  return out;
}

/// Fixed random weighting so every output entry contributes to the scalar.
inline Var weighted_sum(Graph<double>& g, Var x, std::uint64_t seed) {
  Rng rng(seed);
  const auto& v = g.value(x);
  auto target = random_tensor(v.shape(), rng, -2.0, 2.0);
  return g.mse_mean(x, g.constant(target));
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  ScratchDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = std::filesystem::temp_directory_path() /
            ("pcsnet_" + std::string(info->test_suite_name()) + "_" + info->name());
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Small procedural dataset for fast end-to-end tests.
inline ProceduralConfig tiny_dataset_config(std::uint64_t seed = 7) {
  ProceduralConfig cfg;
  cfg.seed = seed;
  cfg.size = 32;
  cfg.train_normal = 3;
  cfg.test_normal = 4;
  cfg.test_anomalous = 4;
  cfg.min_defect_area = 0.02;
  cfg.max_defect_area = 0.08;
  return cfg;
}

}  // namespace pcsnet::testing
