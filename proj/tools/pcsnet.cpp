#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>

#include "pcsnet/pcsnet.hpp"

namespace fs = std::filesystem;
using namespace pcsnet;

namespace {

// Bad flag values detected after parsing (exit code 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 42;
  std::size_t train_normal = 8, test_normal = 100, test_anomalous = 100, size = 128;
};

struct TrainArgs {
  std::string data, out = "model.pcsn", log, method = "nsa", seg_loss = "bce", image_score = "max";
  std::size_t shots = 8, epochs = 50, k = 3, p = 50;
  std::uint64_t seed = 42, extractor_seed = 0;
  double real_defect_frac = 0.0, lambda1 = 30.0, lambda2 = 150.0, lr_adaptor = 1e-3, lr_cas = 1e-4;
  double quantile = 0.9, alpha_fraction = 0.5;
};

struct EvalArgs {
  std::string data, model, report, heatmaps, image_score, source = "cas";
};

struct SynthArgs {
  std::string input, pool, method = "nsa", out_prefix;
  std::uint64_t seed = 0;
  bool fail_on_nonconvergence = false;
};

struct ExportArgs {
  std::string data, model, out, source = "cas";
};

int run_gen_data(const GenDataArgs& a) {
  ProceduralConfig cfg;
  cfg.seed = a.seed;
  cfg.size = a.size;
  cfg.train_normal = a.train_normal;
  cfg.test_normal = a.test_normal;
  cfg.test_anomalous = a.test_anomalous;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  generate_dataset(cfg, a.out);
  std::cout << "wrote dataset to " << a.out << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  try {
    cfg.shots = a.shots;
    cfg.epochs = a.epochs;
    cfg.seed = a.seed;
    cfg.extractor_seed = a.extractor_seed;
    cfg.method = parse_blend_method(a.method);
    cfg.seg_loss = parse_seg_loss(a.seg_loss);
    cfg.image_score = parse_image_score(a.image_score);
    cfg.real_defect_frac = a.real_defect_frac;
    cfg.k = a.k;
    cfg.p = a.p;
    cfg.weights = {a.lambda1, a.lambda2};
    cfg.lr_adaptor = a.lr_adaptor;
    cfg.lr_cas = a.lr_cas;
    cfg.radius.quantile = a.quantile;
    cfg.radius.alpha_fraction = a.alpha_fraction;
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto data = load_dataset(a.data);
  if (cfg.shots > data.train.size())
    throw UsageError("--shots " + std::to_string(cfg.shots) + " exceeds the " + std::to_string(data.train.size()) +
                     " training normals in " + a.data);
  if (cfg.real_defect_frac > 0.0 && data.real_defects.empty())
    throw UsageError("--real-defect-frac needs train/real_defect/{images,masks} in " + a.data);

  const std::string log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  std::ofstream log;
  TrainHooks hooks;
  hooks.on_epoch = [&](const TrainLogEntry& e) {
    std::cerr << "epoch " << e.epoch << "  total " << e.total << "  nfc " << e.nfc << "  afs " << e.afs << "  pdc "
              << e.pdc << "  seg " << e.seg << "  (" << e.wall_seconds << " s)\n";
  };
  const auto t0 = std::chrono::steady_clock::now();
  auto res = train<float>(cfg, data, hooks);
  save_checkpoint(res.model.to_checkpoint(), a.out);
  if (fs::path(log_path).has_parent_path()) fs::create_directories(fs::path(log_path).parent_path());
  log.open(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  for (const auto& e : res.log) log << to_json(e).dump() << "\n";
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "wrote " << a.out << " and " << log_path << " (r_sq " << res.model.bank.r_sq << ", " << secs
            << " s)\n";
  return 0;
}

MapSource parse_source(const std::string& s) {
  if (s == "cas") return MapSource::cas;
  if (s == "similarity") return MapSource::similarity;
  throw UsageError("unknown map source '" + s + "' (expected cas or similarity)");
}

void write_heatmaps(const std::vector<Sample>& test, const std::vector<Tensor<float>>& maps, const fs::path& dir) {
  for (std::size_t i = 0; i < test.size(); ++i) {
    fs::path name = test[i].name;
    name.replace_extension(".pgm");
    write_heatmap(maps[i], dir / name);
  }
}

int run_eval(const EvalArgs& a) {
  auto model = Model<float>::from_checkpoint(load_checkpoint(a.model));
  EvalOptions opt;
  try {
    opt.image_score = a.image_score.empty() ? model.config.image_score : parse_image_score(a.image_score);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  opt.map_source = parse_source(a.source);
  const auto data = load_dataset(a.data);
  std::vector<Tensor<float>> maps;
  const auto rep = evaluate(model, data.test, opt, a.heatmaps.empty() ? nullptr : &maps);
  const std::string doc = report_document(rep, model.extra);
  write_file(a.report, std::vector<std::uint8_t>(doc.begin(), doc.end()));
  if (!a.heatmaps.empty()) write_heatmaps(data.test, maps, a.heatmaps);
  std::cout << "image_auroc " << rep.image_auroc << "\npixel_auroc " << rep.pixel_auroc << "\naupro " << rep.aupro
            << "\n";
  return 0;
}

int run_export(const ExportArgs& a) {
  auto model = Model<float>::from_checkpoint(load_checkpoint(a.model));
  const auto data = load_dataset(a.data);
  EvalOptions opt;
  opt.map_source = parse_source(a.source);
  std::vector<Tensor<float>> maps(data.test.size());
  parallel_for(data.test.size(), [&](std::size_t i) {
    auto inf = model.infer(data.test[i].image);
    maps[i] = opt.map_source == MapSource::cas ? std::move(inf.map) : std::move(inf.sim_map);
  });
  write_heatmaps(data.test, maps, a.out);
  std::cout << "wrote " << maps.size() << " heatmaps to " << a.out << "\n";
  return 0;
}

int run_synth(const SynthArgs& a) {
  SynthOptions opt;
  try {
    opt.method = parse_blend_method(a.method);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto input = to_tensor<float>(read_pnm(a.input));
  if (input.dim(0) != 3) throw UsageError("--input must be an RGB (P6) image");
  std::vector<Tensor<float>> pool;
  for (const auto& p : detail::list_files(a.pool, ".ppm")) pool.push_back(detail::load_rgb(p));
  if (pool.empty()) throw UsageError("--pool " + a.pool + " contains no .ppm images");
  const auto sample = synthesize<float>(input, pool, a.seed, opt);
  write_pnm(a.out_prefix + ".ppm", to_image(sample.image));
  write_pnm(a.out_prefix + "_mask.pgm", to_image(sample.mask));
  for (const auto& rec : sample.provenance)
    std::cout << "patch src=(" << rec.spec.src.x << "," << rec.spec.src.y << "," << rec.spec.src.w << ","
              << rec.spec.src.h << ") dst=(" << rec.spec.dst_x << "," << rec.spec.dst_y << ") source=" << rec.spec.source
              << " iterations=" << rec.iterations << (rec.converged ? "" : " NOT CONVERGED") << "\n";
  if (!sample.converged() && a.fail_on_nonconvergence) {
    std::cerr << "error: Poisson blend did not converge\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot anomaly detection with prototypical feature adaptation"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the procedural desk dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Category seed")->capture_default_str();
  gen_cmd->add_option("--train-normal", gen.train_normal, "Training normals")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--test-normal", gen.test_normal, "Test normals")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--test-anomalous", gen.test_anomalous, "Test anomalies")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", gen.size, "Image side, divisible by 8")
      ->capture_default_str()
      ->check(CLI::Validator(
          [](const std::string& s) {
            std::size_t v = 0;
            try {
              v = std::stoul(s);
            } catch (...) {
              return std::string("not an integer");
            }
            return v > 0 && v % 8 == 0 ? std::string() : "size " + s + " is not a positive multiple of 8";
          },
          "MULTIPLE OF 8"));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset directory");
  train_cmd->add_option("--data", tr.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--shots", tr.shots, "Normal training images (k)")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", tr.seed, "Training seed (shots, init, synthesis)")->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs, "Epochs")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--method", tr.method, "Synthesis method")->capture_default_str()->check(CLI::IsMember({"nsa", "cutpaste"}));
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->capture_default_str();
  train_cmd->add_option("--log", tr.log, "Training log (JSON lines); default <out>.log.jsonl");
  train_cmd->add_option("--seg-loss", tr.seg_loss, "Segmentation loss")->capture_default_str()->check(CLI::IsMember({"mse", "bce"}));
  train_cmd->add_option("--real-defect-frac", tr.real_defect_frac, "Fraction of pairs using train/real_defect")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--image-score", tr.image_score, "Default image score for eval")->capture_default_str()->check(CLI::IsMember({"max", "gs"}));
  train_cmd->add_option("--k", tr.k, "Nearest prototypes per location")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--p", tr.p, "Top-P disparity pixels")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lambda1", tr.lambda1, "PDC weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--lambda2", tr.lambda2, "SEG weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--lr-adaptor", tr.lr_adaptor, "Adaptor learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr-cas", tr.lr_cas, "CAS learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--radius-quantile", tr.quantile, "Quantile for r^2")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--alpha-fraction", tr.alpha_fraction, "alpha = fraction * r")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--extractor-seed", tr.extractor_seed, "Seed of the frozen extractor")->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--data", ev.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--model", ev.model, "Checkpoint path")->required();
  eval_cmd->add_option("--report", ev.report, "Report output path")->required();
  eval_cmd->add_option("--heatmaps", ev.heatmaps, "Directory for per-image heatmap PGMs");
  eval_cmd->add_option("--image-score", ev.image_score, "Image score (max or gs); default from the checkpoint")
      ->check(CLI::IsMember({"max", "gs"}));
  eval_cmd->add_option("--source", ev.source, "Map source (cas or similarity)")->capture_default_str()->check(CLI::IsMember({"cas", "similarity"}));

  SynthArgs sy;
  auto* synth_cmd = app.add_subcommand("synth", "Preview anomaly synthesis on one image");
  synth_cmd->add_option("--input", sy.input, "Normal image (PPM)")->required()->check(CLI::ExistingFile);
  synth_cmd->add_option("--pool", sy.pool, "Directory of source images")->required()->check(CLI::ExistingDirectory);
  synth_cmd->add_option("--method", sy.method, "Blend method")->capture_default_str()->check(CLI::IsMember({"nsa", "cutpaste"}));
  synth_cmd->add_option("--seed", sy.seed, "Synthesis seed")->capture_default_str();
  synth_cmd->add_option("--out-prefix", sy.out_prefix, "Writes <prefix>.ppm and <prefix>_mask.pgm")->required();
  synth_cmd->add_flag("--fail-on-nonconvergence", sy.fail_on_nonconvergence, "Exit 1 if a Poisson solve hits the iteration cap");

  ExportArgs ex;
  auto* export_cmd = app.add_subcommand("export-heatmaps", "Write test-split heatmaps as PGM files");
  export_cmd->add_option("--data", ex.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  export_cmd->add_option("--model", ex.model, "Checkpoint path")->required();
  export_cmd->add_option("--out", ex.out, "Output directory")->required();
  export_cmd->add_option("--source", ex.source, "Map source (cas or similarity)")->capture_default_str()->check(CLI::IsMember({"cas", "similarity"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*synth_cmd) return run_synth(sy);
    if (*export_cmd) return run_export(ex);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
