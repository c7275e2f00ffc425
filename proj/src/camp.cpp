#include "hiq/camp.hpp"

#include <cmath>

#include "hiq/decoder.hpp"
#include "hiq/error.hpp"

namespace hiq {

CampParams CampParams::init(Rng& rng, std::size_t query_numel, std::size_t prior_width, std::size_t dim,
                            double lambda) {
  return {LinearLayer::init(rng, query_numel, dim), LinearLayer::init(rng, prior_width, dim),
          1.0 / std::sqrt(static_cast<double>(dim)), lambda};
}

void CampParams::collect(ParamList& out) const {
  query_proj.collect(out, "camp.query_proj", ParamGroup::kHead);
  prior_proj.collect(out, "camp.prior_proj", ParamGroup::kHead);
}

Tensor camp_forward(const std::vector<Tensor>& q1, const std::vector<Tensor>& q2, const Tensor& prior,
                    const CampParams& p) {
  const std::size_t width = p.query_proj.weight.dim(0);
  std::vector<Tensor> rows;
  rows.reserve(q1.size() + q2.size());
  for (const auto* set : {&q1, &q2})
    for (const auto& q : *set) {
      if (q.numel() != width) {
        throw ConfigError("camp: query of " + std::to_string(q.numel()) + " values, projection expects " +
                          std::to_string(width));
      }
      rows.push_back(reshape(q, {1, width}));
    }
  if (rows.empty()) throw ContractError("camp: no queries");
  if (prior.numel() != p.prior_proj.weight.dim(0)) {
    throw ConfigError("camp: prior of " + std::to_string(prior.numel()) + " values, projection expects " +
                      std::to_string(p.prior_proj.weight.dim(0)));
  }
  const Tensor queries = p.query_proj(concat(rows));                         // Q×d_p
  const Tensor pr = p.prior_proj(reshape(prior, {1, prior.numel()}));        // 1×d_p
  const Tensor scores = matmul(queries, transpose(pr));                      // Q×1
  return scale(reshape(scores, {rows.size()}), p.scale);
}

std::vector<double> camp_targets(const LabelHierarchy& h, std::size_t coarse_gt, std::size_t fine_gt) {
  if (h.parent_of(fine_gt) != coarse_gt) {
    throw LabelError("fine class " + std::to_string(fine_gt) + " is not a child of coarse class " +
                     std::to_string(coarse_gt));
  }
  std::vector<double> t(h.num_coarse() + h.max_branching(2), 0.0);
  t[coarse_gt] = 1.0;
  t[h.num_coarse() + h.local_slot(fine_gt)] = 1.0;
  return t;
}

std::vector<double> camp_refine(const std::vector<double>& logits, const std::vector<double>& scores, double lambda) {
  if (logits.size() != scores.size()) throw DimensionError("camp_refine: logits and scores differ in length");
  if (lambda == 0.0) return logits;
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == kMaskedLogit) {
      out[i] = kMaskedLogit;
      continue;
    }
    const double s = scores[i];
    const double log_sig = s >= 0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s));
    out[i] = logits[i] + lambda * log_sig;
  }
  return out;
}

}  // namespace hiq
