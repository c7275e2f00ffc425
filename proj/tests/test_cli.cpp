#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "hiq/cli.hpp"
#include "hiq/config.hpp"
#include "hiq/trainer.hpp"
#include "json.hpp"

using namespace hiq;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "hiq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hiq_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Writes the tiny synthetic setup as a config file.
fs::path tiny_config_file(const fs::path& dir) {
  TrainConfig cfg;
  cfg.arch = hiq::testing::tiny_model();
  cfg.data.synth.n_coarse = 2;
  cfg.data.synth.children = {2, 2};
  cfg.data.synth.images_per_class = 4;
  cfg.data.synth.image_size = 16;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const fs::path path = dir / "tiny.cfg";
  std::ofstream(path) << to_config_text(cfg);
  return path;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("ablate"), std::string::npos);
  EXPECT_EQ(run({"train", "--help"}).code, 0);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({"train", "--bogus"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"train", "eval"}).code, 1);
  const auto dir = scratch("usage");
  auto bad_key = run({"train", "--set", "train.nope=1", "--out", dir.string()});
  EXPECT_EQ(bad_key.code, 1);
  EXPECT_NE(bad_key.err.find("train.nope"), std::string::npos);
  EXPECT_EQ(run({"train", "--set", "novalue", "--out", dir.string()}).code, 1);
  EXPECT_EQ(run({"train", "--set", "train.lr=abc", "--out", dir.string()}).code, 1);
}

TEST(Cli, MissingCheckpointExitsTwo) {
  auto r = run({"eval", "--checkpoint", "missing.ckpt", "--out", scratch("missing").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing.ckpt"), std::string::npos);
}

TEST(Cli, OverridesRoundTripIntoEffectiveConfig) {
  const auto dir = scratch("override");
  const auto cfg_path = tiny_config_file(dir);
  auto r = run({"gen-data", "--config", cfg_path.string(), "--set", "train.lr=0.0123", "--set", "synth.noise=0.2",
                "--seed", "77", "--no-cfl", "--no-camp", "--out", (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = slurp(dir / "out" / "effective.cfg");
  EXPECT_NE(r.out.find(text), std::string::npos);
  const auto cfg = train_config_from(parse_config_text(text));
  EXPECT_DOUBLE_EQ(cfg.lr, 0.0123);
  EXPECT_DOUBLE_EQ(cfg.data.synth.noise, 0.2);
  EXPECT_EQ(cfg.seed, 77u);
  EXPECT_FALSE(cfg.flags.cfl);
  EXPECT_FALSE(cfg.flags.camp);
  EXPECT_TRUE(cfg.flags.eigen_init);
  EXPECT_EQ(cfg.arch.d_model, hiq::testing::tiny_model().d_model);
}

TEST(Cli, DedicatedFlagsWinOverSet) {
  const auto dir = scratch("precedence");
  auto r = run({"gen-data", "--config", tiny_config_file(dir).string(), "--set", "train.seed=5", "--seed", "9",
                "--set", "ablation.eigen_init=true", "--no-eigen", "--out", (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = train_config_from(parse_config_text(slurp(dir / "out" / "effective.cfg")));
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_FALSE(cfg.flags.eigen_init);
}

TEST(Cli, GenDataWritesManifests) {
  const auto dir = scratch("gen");
  auto r = run({"gen-data", "--config", tiny_config_file(dir).string(), "--out", (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "data" / "taxonomy.txt"));
  EXPECT_TRUE(fs::exists(dir / "data" / "train.csv"));
  EXPECT_TRUE(fs::exists(dir / "data" / "test.csv"));
  const auto h = LabelHierarchy::load(dir / "data" / "taxonomy.txt");
  EXPECT_EQ(h.num_fine(), 4u);
}

TEST(Cli, TrainThenEvalMatchesLibrary) {
  const auto dir = scratch("train");
  const auto cfg_path = tiny_config_file(dir);
  auto t = run({"train", "--config", cfg_path.string(), "--out", (dir / "run").string()});
  ASSERT_EQ(t.code, 0) << t.err;
  ASSERT_TRUE(fs::exists(dir / "run" / "model.ckpt"));
  std::istringstream metrics(slurp(dir / "run" / "metrics.jsonl"));
  std::size_t lines = 0;
  for (std::string line; std::getline(metrics, line); ++lines) EXPECT_TRUE(nlohmann::json::accept(line)) << line;
  EXPECT_GE(lines, 2u);

  auto e = run({"eval", "--checkpoint", (dir / "run" / "model.ckpt").string(), "--out", (dir / "eval").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto line = slurp(dir / "eval" / "eval.json");
  EXPECT_NE(e.out.find(line), std::string::npos);
  const auto record = nlohmann::json::parse(line);

  const auto model = load_checkpoint(dir / "run" / "model.ckpt");
  const auto data = prepare_data(model.cfg);
  const auto expected = evaluate(model, data.hierarchy, data.test);
  EXPECT_DOUBLE_EQ(record["coarse_acc"].get<double>(), expected.coarse_acc);
  EXPECT_DOUBLE_EQ(record["fine_acc_absolute"].get<double>(), expected.fine_acc_absolute);
}

TEST(Cli, InitQueriesDumpsBankAndReport) {
  const auto dir = scratch("queries");
  auto r = run({"init-queries", "--config", tiny_config_file(dir).string(), "--out", (dir / "q").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bank = nlohmann::json::parse(slurp(dir / "q" / "queries.json"));
  EXPECT_EQ(bank["q1"].size(), 2u);
  EXPECT_EQ(bank["q2_base"].size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "q" / "eigen_report.jsonl"));
}

TEST(Cli, AblateWritesReportWithSixVariants) {
  const auto dir = scratch("ablate");
  auto r = run({"ablate", "--config", tiny_config_file(dir).string(), "--seeds", "1,2", "--out", (dir / "ab").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(dir / "ab" / "ablation.json"));
  EXPECT_EQ(report["rows"].size(), 12u);
  EXPECT_EQ(report["medians"].size(), 6u);
  EXPECT_NE(r.out.find("Base+CFL+CAMP+Eigen"), std::string::npos);
}
