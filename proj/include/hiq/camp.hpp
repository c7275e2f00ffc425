#pragma once

#include <vector>

#include "hiq/hierarchy.hpp"
#include "hiq/nn.hpp"

namespace hiq {

/// Error-correction head: every coarse query and every fused fine query is
/// scored against the backbone prior by a scaled dot product.
struct CampParams {
  LinearLayer query_proj;  // flattened query (c_q·h_q·w_q) → d_p
  LinearLayer prior_proj;  // prior width → d_p
  double scale = 1.0;      // 1/sqrt(d_p) by default
  double lambda = 0.5;

  static CampParams init(Rng& rng, std::size_t query_numel, std::size_t prior_width, std::size_t dim, double lambda);
  void collect(ParamList& out) const;
};

/// Scores of length q1.size() + q2.size() (pre-sigmoid).
Tensor camp_forward(const std::vector<Tensor>& q1, const std::vector<Tensor>& q2, const Tensor& prior,
                    const CampParams& p);

/// Ones at coarse_gt and at N_1 + local_slot(fine_gt).
std::vector<double> camp_targets(const LabelHierarchy& h, std::size_t coarse_gt, std::size_t fine_gt);

/// logits + λ·log σ(scores), skipping entries at the masked sentinel.
std::vector<double> camp_refine(const std::vector<double>& logits, const std::vector<double>& scores, double lambda);

}  // namespace hiq
