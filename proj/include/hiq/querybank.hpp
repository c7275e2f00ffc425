#pragma once

#include <vector>

#include "hiq/config.hpp"
#include "hiq/hierarchy.hpp"
#include "hiq/nn.hpp"

namespace hiq {

/// Learnable query maps for both levels plus the coarse→fine fusion
/// parameters. Every map is c_q×h_q×w_q.
///
/// The fine level holds k_2 slot maps regardless of how many fine classes
/// exist; the parent's projected query is blended into every active slot.
struct QueryBank {
  std::vector<Tensor> q1;       // N_1 coarse maps
  std::vector<Tensor> q2_base;  // k_2 slot maps
  Tensor beta_logit;            // scalar; beta = sigmoid(beta_logit)
  ConvLayer proj;               // shared 1×1, identity-initialised

  double beta() const;
  Shape map_shape() const { return q1.front().shape(); }
  void collect(ParamList& out) const;
};

struct EigenClassReport {
  std::vector<double> eigenvalues;  // descending, non-negative
  std::size_t retained = 0;
  bool fallback = false;
};
using EigenInitReport = std::vector<EigenClassReport>;  // indexed by fine id

/// Gaussian maps with per-entry stddev 1/sqrt(h_q·w_q).
QueryBank init_random_queries(const LabelHierarchy& h, const ModelConfig& cfg, Rng& rng);

/// Per-fine-class PCA of luma images downsampled to h_q×w_q. Each fine map is
/// Σ (λ_j / Σλ) v_j over the top m = min(n − 1, h_q·w_q, max_components)
/// components, each v_j signed so its largest-magnitude entry is positive.
/// A rank-0 class falls back to its L2-normalised mean image.
///
/// images[f] holds the (normalised) C×H×W images of fine class f.
std::pair<QueryBank, EigenInitReport> init_eigen_queries(const std::vector<std::vector<Tensor>>& images,
                                                         const LabelHierarchy& h, const ModelConfig& cfg);

/// Single-class eigen map (h_q·w_q values) for already downsampled, flattened
/// samples. Exposed for testing against an independent oracle.
std::vector<double> eigen_query_map(const std::vector<std::vector<double>>& samples, std::size_t max_components,
                                    EigenClassReport* report = nullptr);

/// Luma (or the single channel) area-averaged to out_h×out_w; falls back to
/// bilinear sampling when the sizes do not divide.
std::vector<double> downsample_luma(const Tensor& image, std::size_t out_h, std::size_t out_w);

Tensor project_coarse_query(const QueryBank& bank, std::size_t coarse_id);

enum class CoarseSource { kGroundTruth, kPredicted };

/// Q_2[s] = (β·q2_base[s] + (1 − β)·Q^p) · mask[s]. The coarse source only
/// records where coarse_id came from; the arithmetic is the same.
std::vector<Tensor> fuse_queries(const QueryBank& bank, const LabelHierarchy& h, std::size_t coarse_id,
                                 CoarseSource source);

/// Query slots decoded at a level: N_1 at level 1, k_2 at level 2.
std::size_t active_query_count(const LabelHierarchy& h, std::size_t level);

}  // namespace hiq
