#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "hiq/error.hpp"
#include "hiq/trainer.hpp"

using namespace hiq;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.arch = hiq::testing::tiny_model();
  cfg.data.synth.n_coarse = 2;
  cfg.data.synth.children = {2, 2};
  cfg.data.synth.images_per_class = 5;
  cfg.data.synth.image_size = 16;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  return cfg;
}

// 2 coarse × 2 fine, two images per class.
Dataset eight_images(const TrainConfig& cfg, LabelHierarchy& h) {
  SynthConfig synth = cfg.data.synth;
  synth.images_per_class = 2;
  auto data = generate_synthetic(synth);
  h = data.hierarchy;
  Dataset all = data.train;
  all.insert(all.end(), data.test.begin(), data.test.end());
  return all;
}

std::vector<double> snapshot(const ParamList& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST(ScorePredictions, HandCase) {
  // Coarse right on 3 of 4; fine right on 2 of those 3.
  std::vector<Prediction> preds{{0, 0, 0, 0}, {1, 3, 1, 3}, {1, 2, 1, 3}, {0, 1, 1, 3}};
  auto r = score_predictions(preds);
  EXPECT_DOUBLE_EQ(r.coarse_acc, 0.75);
  EXPECT_DOUBLE_EQ(r.fine_acc_conditional, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.fine_acc_absolute, 0.5);
  EXPECT_EQ(r.samples, 4u);
}

TEST(ScorePredictions, EmptyInputRejectedAndNoCoarseHitsGiveZero) {
  EXPECT_THROW(score_predictions({}), DataError);
  auto r = score_predictions({{1, 2, 0, 0}});
  EXPECT_EQ(r.coarse_acc, 0.0);
  EXPECT_EQ(r.fine_acc_conditional, 0.0);
}

TEST(ScorePredictions, AbsoluteNeverExceedsEitherAccuracy) {
  std::mt19937_64 g(3);
  std::uniform_int_distribution<std::size_t> label(0, 2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Prediction> preds(1 + trial % 17);
    for (auto& p : preds) p = {label(g), label(g), label(g), label(g)};
    auto r = score_predictions(preds);
    EXPECT_LE(r.fine_acc_absolute, std::min(r.coarse_acc, r.fine_acc_conditional) + 1e-15);
    for (double a : {r.coarse_acc, r.fine_acc_conditional, r.fine_acc_absolute}) {
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
  }
}

TEST(Train, OverfitsEightImages) {
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 8;
  cfg.epochs = 200;
  cfg.flags = {false, false, false};
  LabelHierarchy h;
  const Dataset data = eight_images(cfg, h);
  ASSERT_EQ(data.size(), 8u);
  auto result = train(cfg, h, data);
  const double initial = result.epochs.front().loss.total;
  double best = initial;
  for (const auto& e : result.epochs) best = std::min(best, e.loss.total);
  EXPECT_LT(result.epochs.back().loss.total, 0.1 * initial) << "best " << best;
  EXPECT_EQ(result.epochs.back().step, 200u);
}

TEST(Train, ZeroEpochsLeavesInitialisation) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  cfg.flags.eigen_init = false;
  auto data = prepare_data(cfg);
  auto result = train(cfg, data.hierarchy, data.train);
  EXPECT_TRUE(result.epochs.empty());
  EXPECT_TRUE(result.metrics_lines.empty());
  const auto fresh = initial_model(cfg, data.hierarchy, NormStats::compute(data.train));
  EXPECT_EQ(checkpoint_bytes(result.model), checkpoint_bytes(fresh));
}

TEST(Train, IdenticalRunsAreByteIdentical) {
  TrainConfig cfg = tiny_config();
  cfg.data.hflip = true;
  auto data = prepare_data(cfg);
  auto a = train(cfg, data.hierarchy, data.train, {&data.test, {}});
  auto b = train(cfg, data.hierarchy, data.train, {&data.test, {}});
  EXPECT_EQ(a.metrics_lines, b.metrics_lines);
  EXPECT_EQ(checkpoint_bytes(a.model), checkpoint_bytes(b.model));
  cfg.seed = 2;
  auto c = train(cfg, data.hierarchy, data.train, {&data.test, {}});
  EXPECT_NE(checkpoint_bytes(a.model), checkpoint_bytes(c.model));
}

TEST(Train, MetricsStreamIsVersionedJsonl) {
  TrainConfig cfg = tiny_config();
  auto data = prepare_data(cfg);
  std::vector<std::string> streamed;
  auto result = train(cfg, data.hierarchy, data.train, {&data.test, [&](const std::string& l) { streamed.push_back(l); }});
  EXPECT_EQ(streamed, result.metrics_lines);
  ASSERT_EQ(result.metrics_lines.size(), 3u);  // eigen report + 2 epochs
  EXPECT_NE(result.metrics_lines[0].find("\"type\":\"eigen_init\""), std::string::npos);
  for (const auto& line : result.metrics_lines) {
    EXPECT_EQ(line.rfind("{\"schema\":1,", 0), 0u) << line;
    EXPECT_EQ(line.find('\n'), std::string::npos);
    EXPECT_EQ(line.find("wall_clock"), std::string::npos);
  }
  for (const auto& e : result.epochs) EXPECT_LE(e.fine_acc_absolute, std::min(e.coarse_acc, e.fine_acc_conditional));
  cfg.log_wall_clock = true;
  auto timed = train(cfg, data.hierarchy, data.train);
  EXPECT_NE(timed.metrics_lines.back().find("wall_clock_s"), std::string::npos);
}

TEST(Train, BackboneStepsAtReducedRate) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.momentum = 0.0;
  cfg.grad_clip = 0.0;
  cfg.lr = 0.01;
  cfg.backbone_lr_mult = 0.25;
  cfg.flags.eigen_init = false;
  auto data = prepare_data(cfg);
  const Dataset one{data.train[3]};
  const auto stats = NormStats::compute(one);
  auto fresh = initial_model(cfg, data.hierarchy, stats);
  const auto before = snapshot(fresh.parameters());
  const auto loss_cfg = cfg.effective_loss();
  const std::size_t fine = one[0].fine_label;
  auto out = hierarchical_forward(stats.apply(one[0].image), fresh.hier, data.hierarchy, {fine, true, true});
  total_loss(loss_inputs(out, fresh.hier, data.hierarchy, fine, loss_cfg), loss_cfg).total.backward();

  auto trained = train(cfg, data.hierarchy, one).model;
  const auto after = snapshot(trained.parameters());
  std::size_t offset = 0, backbone_moved = 0;
  for (const auto& p : fresh.parameters()) {
    const double lr = cfg.lr * (p.group == ParamGroup::kBackbone ? cfg.backbone_lr_mult : 1.0);
    for (std::size_t i = 0; i < p.tensor.numel(); ++i, ++offset) {
      const double g = p.tensor.has_grad() ? p.tensor.grad()[i] : 0.0;
      ASSERT_NEAR(after[offset], before[offset] - lr * g, 1e-12) << p.name;
      backbone_moved += p.group == ParamGroup::kBackbone && g != 0.0;
    }
  }
  EXPECT_GT(backbone_moved, 0u);
}

TEST(Train, NonFiniteLossAborts) {
  TrainConfig cfg = tiny_config();
  cfg.lr = 1e150;
  cfg.grad_clip = 0.0;
  cfg.epochs = 5;
  auto data = prepare_data(cfg);
  try {
    train(cfg, data.hierarchy, data.train);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Train, EmptyTrainingSetRejected) {
  TrainConfig cfg = tiny_config();
  EXPECT_THROW(train(cfg, hiq::testing::hierarchy_of({2, 2}), {}), DataError);
}

TEST(Evaluate, HierarchyMismatchRejected) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  auto data = prepare_data(cfg);
  auto model = train(cfg, data.hierarchy, data.train).model;
  EXPECT_THROW(evaluate(model, hiq::testing::hierarchy_of({2, 3}), data.test), ContractError);
  EXPECT_THROW(evaluate(model, data.hierarchy, {}), DataError);
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  TrainConfig cfg = tiny_config();
  auto data = prepare_data(cfg);
  for (const char* kind : {"hierarchical", "flat"}) {
    cfg.model = kind;
    auto model = train(cfg, data.hierarchy, data.train).model;
    const fs::path path = fs::temp_directory_path() / "hiq_roundtrip.ckpt";
    save_checkpoint(model, path);
    auto loaded = load_checkpoint(path, &data.hierarchy);
    fs::remove(path);
    EXPECT_EQ(checkpoint_bytes(loaded), checkpoint_bytes(model));
    EXPECT_EQ(loaded.cfg, model.cfg);
    const auto a = predict(model, data.test), b = predict(loaded, data.test);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].coarse_pred, b[i].coarse_pred);
      EXPECT_EQ(a[i].fine_pred, b[i].fine_pred);
    }
  }
}

TEST(Checkpoint, TruncationAndCorruptionDetected) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  auto data = prepare_data(cfg);
  const auto bytes = checkpoint_bytes(train(cfg, data.hierarchy, data.train).model);
  for (std::size_t cut : {bytes.size() - 1, bytes.size() - 8, bytes.size() / 2, std::size_t{10}, std::size_t{0}})
    EXPECT_THROW(checkpoint_from_bytes(bytes.substr(0, cut)), FormatError) << cut;
  EXPECT_THROW(checkpoint_from_bytes(bytes + "x"), FormatError);
  EXPECT_THROW(load_checkpoint(fs::temp_directory_path() / "hiq_no_such.ckpt"), IoError);
}

TEST(Checkpoint, DifferentBranchingRejectedWithKTwo) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  auto data = prepare_data(cfg);
  const auto bytes = checkpoint_bytes(train(cfg, data.hierarchy, data.train).model);
  const auto other = hiq::testing::hierarchy_of({2, 3});
  try {
    checkpoint_from_bytes(bytes, &other);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("k_2"), std::string::npos) << e.what();
  }
}

TEST(Ablation, SixVariantsThreeSeeds) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  auto data = prepare_data(cfg);
  auto report = run_ablation(cfg, data, {1, 2, 3}, 2);
  ASSERT_EQ(report.rows.size(), 18u);
  ASSERT_EQ(report.medians.size(), 6u);
  const auto variants = ablation_variants();
  EXPECT_EQ(variants.front().name, "Base");
  EXPECT_EQ(variants.front().flags, (AblationFlags{false, false, false}));
  EXPECT_EQ(variants[4].name, "Base+CFL+CAMP+Eigen");
  EXPECT_EQ(variants[4].flags, (AblationFlags{true, true, true}));
  EXPECT_EQ(variants.back().model, "flat");
  for (std::size_t i = 0; i < 18; ++i) {
    EXPECT_EQ(report.rows[i].variant, variants[i / 3].name);
    EXPECT_EQ(report.rows[i].seed, i % 3 + 1);
  }
  // Thread count does not change the results.
  auto serial = run_ablation(cfg, data, {1, 2, 3}, 1);
  EXPECT_EQ(serial.to_json(), report.to_json());
  EXPECT_NE(report.to_table().find("median"), std::string::npos);
  EXPECT_THROW(report.median("nope"), ContractError);
}
