#pragma once

#include <cstdint>
#include <vector>

#include "hiq/config.hpp"
#include "hiq/tensor.hpp"

namespace hiq {

/// S_i = <f, Q(i)> / max(‖f‖·‖Q(i)‖, 1e-12) for each row of queries (n×d).
Tensor cosine_similarities(const Tensor& f, const Tensor& queries);

/// Cluster focal loss: p = softmax(τ·S)_y, loss = −α·(1 − p)^γ·log p.
Tensor cluster_focal_loss(const Tensor& f, const Tensor& queries, std::size_t label, const LossConfig& cfg);

/// Same loss from precomputed similarities.
Tensor cluster_focal_loss_from_similarity(const Tensor& similarity, std::size_t label, const LossConfig& cfg);

Tensor cross_entropy(const Tensor& logits, std::size_t label);

/// Cross entropy over the active (set) slots only; inactive slots are ignored.
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<std::uint8_t>& mask, std::size_t slot);

/// Mean binary cross entropy of sigmoid(scores) against targets.
Tensor binary_cross_entropy(const Tensor& scores, const std::vector<double>& targets);

/// Per-sample ingredients of the objective. Undefined tensors mark terms that
/// are not computed; they must carry zero weight.
struct LossInputs {
  Tensor coarse_logits;       // N_1
  std::size_t coarse_label = 0;
  Tensor fine_logits;         // active slots of the chosen parent
  std::size_t fine_slot = 0;
  Tensor feature1, queries1;  // pooled level-1 feature (d), level-1 query vectors (N_1×d)
  Tensor feature2, queries2;  // same for level 2, active slots only
  Tensor camp_scores;         // N_1 + active slots
  std::vector<double> camp_targets;
};

struct LossBreakdown {
  Tensor total;
  double ce1 = 0, ce2 = 0, cfl1 = 0, cfl2 = 0, bce = 0;
};

/// w_ce1·CE1 + w_ce2·CE2 + w_cfl1·CFL1 + w_cfl2·CFL2 + w_bce·BCE. Terms with
/// zero weight are skipped entirely.
LossBreakdown total_loss(const LossInputs& in, const LossConfig& cfg);

}  // namespace hiq
