#include "hiq/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "hiq/error.hpp"
#include "hiq/trainer.hpp"

namespace hiq {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "hiq_out";
  std::optional<std::uint64_t> seed;
  bool no_cfl = false, no_camp = false, no_eigen = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Config file ([section] key = value)");
  cmd->add_option("--set", o.sets, "Override one key, e.g. --set train.lr=0.01 (repeatable)");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--seed", o.seed, "Training seed (train.seed)");
  cmd->add_flag("--no-cfl", o.no_cfl, "Disable the cluster focal loss");
  cmd->add_flag("--no-camp", o.no_camp, "Disable the CAMP head");
  cmd->add_flag("--no-eigen", o.no_eigen, "Random instead of eigen query initialisation");
}

// Usage-level failures: the arguments do not describe a valid configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Defaults, then the config file, then --set, then the dedicated flags.
TrainConfig effective_config(const CommonOptions& o, TrainConfig base = {}) {
  try {
    if (!o.config.empty()) base = train_config_from(read_config_file(o.config), base);
    for (const auto& s : o.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(base, s.substr(0, eq), s.substr(eq + 1));
    }
    if (o.seed) base.seed = *o.seed;
    if (o.no_cfl) base.flags.cfl = false;
    if (o.no_camp) base.flags.camp = false;
    if (o.no_eigen) base.flags.eigen_init = false;
    base.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return base;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

fs::path prepare_out(const CommonOptions& o) {
  fs::path dir(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void echo_config(const TrainConfig& cfg, const fs::path& dir, std::ostream& out) {
  const std::string text = to_config_text(cfg);
  out << "# effective configuration\n" << text << "\n";
  write_file(dir / "effective.cfg", text);
}

const Dataset& eval_split(const PreparedData& data) { return data.test.empty() ? data.train : data.test; }

int cmd_train(const CommonOptions& o, std::ostream& out) {
  const TrainConfig cfg = effective_config(o);
  const fs::path dir = prepare_out(o);
  echo_config(cfg, dir, out);
  const auto data = prepare_data(cfg, worker_threads());
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  const auto result = train(cfg, data.hierarchy, data.train, {&eval_split(data), [&](const std::string& line) {
                                                                metrics << line << '\n';
                                                                metrics.flush();
                                                                out << line << '\n';
                                                              }});
  save_checkpoint(result.model, dir / "model.ckpt");
  out << "checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, std::ostream& out) {
  TrainedModel model = load_checkpoint(checkpoint);
  // The stored config supplies the data source unless overridden.
  const TrainConfig cfg = effective_config(o, model.cfg);
  const fs::path dir = prepare_out(o);
  echo_config(cfg, dir, out);
  const auto data = prepare_data(cfg, worker_threads());
  const std::string line = to_json_line(evaluate(model, data.hierarchy, eval_split(data)));
  write_file(dir / "eval.json", line + "\n");
  out << line << "\n";
  return 0;
}

int cmd_ablate(const CommonOptions& o, const std::vector<std::uint64_t>& seeds, std::ostream& out) {
  const TrainConfig cfg = effective_config(o);
  const fs::path dir = prepare_out(o);
  echo_config(cfg, dir, out);
  const auto data = prepare_data(cfg, worker_threads());
  const auto report = run_ablation(cfg, data, seeds, worker_threads());
  write_file(dir / "ablation.json", report.to_json() + "\n");
  out << report.to_table();
  return 0;
}

int cmd_init_queries(const CommonOptions& o, std::ostream& out) {
  const TrainConfig cfg = effective_config(o);
  const fs::path dir = prepare_out(o);
  echo_config(cfg, dir, out);
  const auto data = prepare_data(cfg, worker_threads());
  const auto stats = NormStats::compute(data.train);
  const auto images = normalize_batch(data.train, stats);
  std::vector<std::vector<Tensor>> per_class(data.hierarchy.num_fine());
  for (std::size_t i = 0; i < data.train.size(); ++i) per_class[data.train[i].fine_label].push_back(images[i]);
  const auto [bank, report] = init_eigen_queries(per_class, data.hierarchy, cfg.arch);

  using nlohmann::ordered_json;
  auto maps = [](const std::vector<Tensor>& ts) {
    ordered_json a = ordered_json::array();
    for (const auto& t : ts) a.push_back(std::vector<double>(t.data().begin(), t.data().end()));
    return a;
  };
  const Shape shape = bank.map_shape();
  ordered_json j{{"schema", kMetricsSchemaVersion},
                 {"map_shape", shape},
                 {"beta", bank.beta()},
                 {"q1", maps(bank.q1)},
                 {"q2_base", maps(bank.q2_base)}};
  write_file(dir / "queries.json", j.dump() + "\n");
  const std::string line = to_json_line(report, data.hierarchy);
  write_file(dir / "eigen_report.jsonl", line + "\n");
  std::size_t fallbacks = 0;
  for (const auto& c : report) fallbacks += c.fallback;
  out << "queries " << (dir / "queries.json").string() << " (" << bank.q1.size() << " coarse, " << bank.q2_base.size()
      << " slots, " << fallbacks << " fallback classes)\n";
  return 0;
}

int cmd_gen_data(const CommonOptions& o, std::ostream& out) {
  const TrainConfig cfg = effective_config(o);
  const fs::path dir = prepare_out(o);
  echo_config(cfg, dir, out);
  const auto data = generate_synthetic(cfg.data.synth, worker_threads());
  write_dataset(dir, data);
  out << "wrote " << data.train.size() << " train and " << data.test.size() << " test images to " << dir.string()
      << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical query classifier: training, evaluation and ablation on CPU", "hiq"};
  app.require_subcommand(1, 1);

  CommonOptions train_o, eval_o, ablate_o, init_o, gen_o;
  std::string checkpoint;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  auto* train_cmd = app.add_subcommand("train", "Train one model; writes metrics.jsonl and model.ckpt");
  add_common(train_cmd, train_o);
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  add_common(eval_cmd, eval_o);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  auto* ablate_cmd = app.add_subcommand("ablate", "Train every ablation variant over several seeds");
  add_common(ablate_cmd, ablate_o);
  ablate_cmd->add_option("--seeds", seeds, "Seeds to train")->delimiter(',')->capture_default_str();
  auto* init_cmd = app.add_subcommand("init-queries", "Compute eigen query maps and their report");
  add_common(init_cmd, init_o);
  auto* gen_cmd = app.add_subcommand("gen-data", "Write the synthetic dataset as images plus manifests");
  add_common(gen_cmd, gen_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return cmd_train(train_o, out);
    if (*eval_cmd) return cmd_eval(eval_o, checkpoint, out);
    if (*ablate_cmd) return cmd_ablate(ablate_o, seeds, out);
    if (*init_cmd) return cmd_init_queries(init_o, out);
    return cmd_gen_data(gen_o, out);
  } catch (const UsageError& e) {
    err << "hiq: " << e.what() << "\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    err << "hiq: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace hiq
