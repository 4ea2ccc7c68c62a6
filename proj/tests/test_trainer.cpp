#include "support.hpp"

using namespace pcsnet;
using namespace pcsnet::testing;

namespace {

TrainConfig tiny_train_config(std::uint64_t seed = 5) {
  TrainConfig cfg;
  cfg.shots = 2;
  cfg.epochs = 3;
  cfg.seed = seed;
  return cfg;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = [] {
    const auto root = std::filesystem::temp_directory_path() / "pcsnet_trainer_tiny";
    std::filesystem::remove_all(root);
    generate_dataset(tiny_dataset_config(), root);
    auto loaded = load_dataset(root);
    std::filesystem::remove_all(root);
    return loaded;
  }();
  return ds;
}

}  // namespace

TEST(Trainer, LoggedTotalsRecomposeExactly) {
  const auto cfg = tiny_train_config();
  const auto res = train<float>(cfg, tiny_dataset());
  ASSERT_EQ(res.steps.size(), cfg.epochs * cfg.shots);
  ASSERT_EQ(res.log.size(), cfg.epochs);
  for (const auto& s : res.steps) {
    const float want = total_loss_value<float>(static_cast<float>(s.nfc), static_cast<float>(s.afs), static_cast<float>(s.pdc),
                                               static_cast<float>(s.seg), cfg.weights);
    EXPECT_EQ(static_cast<float>(s.total), want) << "epoch " << s.epoch << " pair " << s.pair;
    EXPECT_GE(s.nfc, 0.0);
    EXPECT_GE(s.afs, 0.0);
    EXPECT_FALSE(s.real_defect);
  }
  for (const auto& e : res.log) {
    double total = 0.0;
    for (const auto& s : res.steps)
      if (s.epoch == e.epoch) total += s.total / double(cfg.shots);
    EXPECT_DOUBLE_EQ(e.total, total);
    EXPECT_EQ(e.r_sq, res.log.front().r_sq);
  }
}

TEST(Trainer, ExtractorStaysFrozenAndBankMatchesSupport) {
  const auto cfg = tiny_train_config();
  auto res = train<float>(cfg, tiny_dataset());
  const Extractor<float> fresh(cfg.extractor_seed);
  const auto a = res.model.extractor.weights(), b = fresh.weights();
  ASSERT_EQ(a.size(), 6u);
  for (const auto& [name, t] : a) EXPECT_EQ(t.vec(), b.at(name).vec()) << name;

  EXPECT_EQ(res.support, select_shots(tiny_dataset().train.size(), cfg.shots, cfg.seed));
  std::vector<Tensor<float>> feats;
  for (auto i : res.support) feats.push_back(res.model.features(tiny_dataset().train[i].image));
  EXPECT_EQ(build_prototypes<float>(feats, cfg.k).prototypes.vec(), res.model.bank.prototypes.vec());
  EXPECT_EQ(res.model.bank.r_sq, res.log.front().r_sq);
}

TEST(Trainer, DeterministicCheckpoints) {
  const auto cfg = tiny_train_config();
  auto a = train<float>(cfg, tiny_dataset());
  auto b = train<float>(cfg, tiny_dataset());
  EXPECT_EQ(encode_checkpoint(a.model.to_checkpoint()), encode_checkpoint(b.model.to_checkpoint()));
  auto c = train<float>(tiny_train_config(6), tiny_dataset());
  EXPECT_NE(encode_checkpoint(a.model.to_checkpoint()), encode_checkpoint(c.model.to_checkpoint()));
}

TEST(Trainer, FrozenCasKeepsInitialWeights) {
  auto cfg = tiny_train_config();
  cfg.train_cas = false;
  auto res = train<float>(cfg, tiny_dataset());
  Model<float> init(cfg);
  const auto a = res.model.cas.parameters(), b = init.cas.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value.vec(), b[i]->value.vec());
  EXPECT_NE(res.model.adaptor.parameters()[0]->value.vec(), init.adaptor.parameters()[0]->value.vec());
}

TEST(Trainer, RejectsBadRequests) {
  auto cfg = tiny_train_config();
  cfg.shots = 4;
  EXPECT_THROW(train<float>(cfg, tiny_dataset()), std::invalid_argument);
  cfg = tiny_train_config();
  cfg.real_defect_frac = 0.5;
  EXPECT_THROW(train<float>(cfg, tiny_dataset()), std::invalid_argument);
  cfg = tiny_train_config();
  cfg.epochs = 0;
  EXPECT_THROW(train<float>(cfg, tiny_dataset()), std::invalid_argument);
}

TEST(Trainer, RealDefectPairsReplaceSynthesis) {
  Dataset ds = tiny_dataset();
  for (const auto& s : ds.test)
    if (s.label == 1) ds.real_defects.push_back(s);
  auto cfg = tiny_train_config();
  cfg.real_defect_frac = 1.0;
  const auto res = train<float>(cfg, ds);
  for (const auto& s : res.steps) EXPECT_TRUE(s.real_defect);
  cfg.real_defect_frac = 0.5;
  const auto mixed = train<float>(cfg, ds);
  EXPECT_EQ(mixed.steps.size(), cfg.epochs * cfg.shots);
}

TEST(Trainer, CheckpointCarriesTrajectory) {
  auto res = train<float>(tiny_train_config(), tiny_dataset());
  const auto meta = nlohmann::json::parse(res.model.to_checkpoint().config);
  ASSERT_TRUE(meta.contains("training"));
  EXPECT_EQ(meta["training"]["loss_trajectory"].size(), 3u);
  EXPECT_EQ(meta["training"]["support"].size(), 2u);
  EXPECT_EQ(meta["config"]["seed"].get<std::uint64_t>(), 5u);
}

TEST(Evaluate, ReportIsDeterministicAndConsistent) {
  auto res = train<float>(tiny_train_config(), tiny_dataset());
  const auto& test = tiny_dataset().test;
  std::vector<Tensor<float>> maps;
  const auto rep = evaluate(res.model, test, {}, &maps);
  ASSERT_EQ(maps.size(), test.size());
  EXPECT_EQ(rep.labels, (std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}));
  for (std::size_t i = 0; i < test.size(); ++i) EXPECT_EQ(rep.scores[i], static_cast<double>(maps[i].max()));
  EXPECT_EQ(report_document(rep, res.model.extra), report_document(evaluate(res.model, test), res.model.extra));
  const auto doc = nlohmann::json::parse(report_document(rep, res.model.extra));
  EXPECT_EQ(doc["images"].size(), test.size());
  EXPECT_EQ(doc["loss_trajectory"].size(), 3u);
  EvalOptions gs;
  gs.image_score = ImageScore::gs;
  EXPECT_EQ(evaluate(res.model, test, gs).scores, rep.gs);
  EXPECT_THROW(evaluate(res.model, std::vector<Sample>{}), std::invalid_argument);
}
