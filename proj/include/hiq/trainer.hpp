#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hiq/config.hpp"
#include "hiq/data.hpp"
#include "hiq/model.hpp"

namespace hiq {

/// Raised when the training loss stops being finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A model with everything needed to evaluate it on its own.
struct TrainedModel {
  TrainConfig cfg;
  LabelHierarchy hierarchy;
  NormStats stats;
  HierarchicalModel hier;  // used when cfg.model == "hierarchical"
  FlatModel flat;          // used when cfg.model == "flat"

  bool is_flat() const { return cfg.model == "flat"; }
  ParamList parameters() const;
};

struct LossSummary {
  double total = 0, ce1 = 0, ce2 = 0, cfl1 = 0, cfl2 = 0, bce = 0;
};

/// One evaluation snapshot.
struct MetricsRecord {
  std::string type = "eval";  // epoch | eval
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  LossSummary loss;  // mean training loss over the epoch (epoch records)
  double coarse_acc = 0;
  double fine_acc_conditional = 0;
  double fine_acc_absolute = 0;
  std::size_t samples = 0;
  std::optional<double> wall_clock_s;
};

inline constexpr int kMetricsSchemaVersion = 1;

std::string to_json_line(const MetricsRecord& r);
std::string to_json_line(const EigenInitReport& report, const LabelHierarchy& h);

struct Prediction {
  std::size_t coarse_pred, fine_pred, coarse_true, fine_true;
};

/// coarse_acc = P(coarse correct); fine_acc_conditional = P(fine correct |
/// coarse correct), 0 when no coarse prediction is correct;
/// fine_acc_absolute = P(both correct). Empty input is an error.
MetricsRecord score_predictions(const std::vector<Prediction>& preds);

struct PreparedData {
  LabelHierarchy hierarchy;
  Dataset train;
  Dataset test;
};
PreparedData prepare_data(const TrainConfig& cfg, std::size_t threads = 1);

struct TrainResult {
  TrainedModel model;
  std::vector<MetricsRecord> epochs;
  std::vector<std::string> metrics_lines;  // JSONL stream, one object per line
  EigenInitReport eigen_report;
};

struct TrainOptions {
  const Dataset* eval_set = nullptr;  // per-epoch metrics; the training split when null
  std::function<void(const std::string&)> on_line;  // receives each JSONL line as it is produced
};

/// SGD with momentum. Hierarchical models run in train mode (ground-truth
/// parent drives the fine level); backbone parameters step at
/// lr · backbone_lr_mult.
TrainResult train(const TrainConfig& cfg, const LabelHierarchy& h, const Dataset& train_set,
                  const TrainOptions& opts = {});

/// Predicted coarse drives the fine level; CAMP refinement applies when the
/// model was trained with it.
MetricsRecord evaluate(const TrainedModel& model, const LabelHierarchy& h, const Dataset& data);
std::vector<Prediction> predict(const TrainedModel& model, const Dataset& data);

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
std::string checkpoint_bytes(const TrainedModel& model);
/// expected, when given, must match the stored hierarchy.
TrainedModel load_checkpoint(const std::filesystem::path& path, const LabelHierarchy* expected = nullptr);
TrainedModel checkpoint_from_bytes(const std::string& bytes, const LabelHierarchy* expected = nullptr);

/// Fresh model for cfg (no training, no eigen init).
TrainedModel initial_model(const TrainConfig& cfg, const LabelHierarchy& h, const NormStats& stats);

struct AblationVariant {
  std::string name;
  std::string model;  // hierarchical | flat
  AblationFlags flags;
};
/// Base, +CFL, +CFL+Eigen, +CFL+CAMP, +CFL+CAMP+Eigen, Flat.
std::vector<AblationVariant> ablation_variants();

struct AblationRow {
  std::string variant;
  std::uint64_t seed;
  MetricsRecord metrics;
};

struct AblationReport {
  std::vector<AblationRow> rows;     // variants × seeds
  std::vector<AblationRow> medians;  // one per variant, seed 0
  std::string to_json() const;
  std::string to_table() const;
  const AblationRow& median(const std::string& variant) const;
};

/// Trains every variant for every seed on the same data; runs are spread
/// over up to `threads` workers and assembled in a fixed order.
AblationReport run_ablation(const TrainConfig& base, const PreparedData& data,
                            const std::vector<std::uint64_t>& seeds = {1, 2, 3}, std::size_t threads = 1);

/// HIQ_THREADS if set (≥ 1), otherwise the hardware concurrency.
std::size_t worker_threads();

}  // namespace hiq
