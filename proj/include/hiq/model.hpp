#pragma once

#include <optional>
#include <vector>

#include "hiq/backbone.hpp"
#include "hiq/camp.hpp"
#include "hiq/config.hpp"
#include "hiq/decoder.hpp"
#include "hiq/fusion.hpp"
#include "hiq/hierarchy.hpp"
#include "hiq/losses.hpp"
#include "hiq/querybank.hpp"

namespace hiq {

/// C×H×W of each backbone stage output for a config.
std::vector<Shape> backbone_tap_shapes(const ModelConfig& cfg);

struct HierarchicalModel {
  Backbone backbone;
  FusionStack fusion1;
  FusionStack fusion2;
  QueryBank queries;
  LevelDecoder decoder1;  // N_1 slots
  LevelDecoder decoder2;  // k_2 slots
  CampParams camp;
  std::vector<std::size_t> taps1;  // 1-based backbone stages per level
  std::vector<std::size_t> taps2;

  /// Random queries; call init_eigen_queries separately to replace them.
  static HierarchicalModel init(const ModelConfig& cfg, const LabelHierarchy& h, Rng& rng);
  ParamList parameters() const;
};

/// Flat softmax baseline: backbone → GAP of the deepest map → linear → N_2.
struct FlatModel {
  Backbone backbone;
  LinearLayer head;

  static FlatModel init(const ModelConfig& cfg, const LabelHierarchy& h, Rng& rng);
  ParamList parameters() const;
  Tensor forward(const Tensor& image) const;
};

struct ForwardOptions {
  // Train mode: the ground-truth parent drives the fine level.
  std::optional<std::size_t> fine_label;
  bool train = false;
  bool camp = true;
};

struct HierarchicalOutput {
  std::vector<double> coarse_logits;       // N_1 (CAMP-refined at inference when enabled)
  std::vector<double> fine_logits_local;   // k_2, masked slots hold kMaskedLogit
  std::vector<double> fine_logits_global;  // N_2, only the chosen parent's block populated
  std::size_t chosen_coarse = 0;
  std::vector<double> camp_scores;         // N_1 + k_2, empty without CAMP
  std::size_t predicted_fine = 0;          // argmax of fine_logits_global

  // Graph handles for the training objective.
  Tensor coarse_raw;  // N_1
  Tensor fine_raw;    // k_2
  Tensor camp_raw;    // N_1 + k_2
  Tensor feature1, feature2;
  std::vector<Tensor> fused_queries;
  SubclassMask mask;
};

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(const std::vector<double>& values);

HierarchicalOutput hierarchical_forward(const Tensor& image, const HierarchicalModel& model, const LabelHierarchy& h,
                                        const ForwardOptions& opts);

/// Loss ingredients for a train-mode output. CFL query vectors are only built
/// when their weight is non-zero.
LossInputs loss_inputs(const HierarchicalOutput& out, const HierarchicalModel& model, const LabelHierarchy& h,
                       std::size_t fine_label, const LossConfig& cfg);

}  // namespace hiq
