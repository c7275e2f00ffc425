#include "hiq/losses.hpp"

#include "hiq/error.hpp"

namespace hiq {

namespace {

void check_label(const Tensor& logits, std::size_t label, const char* what) {
  if (logits.rank() != 1) throw DimensionError(std::string(what) + ": expects a vector, got " + shape_str(logits.shape()));
  if (label >= logits.dim(0)) {
    throw LabelError(std::string(what) + ": label " + std::to_string(label) + " outside [0, " +
                     std::to_string(logits.dim(0)) + ")");
  }
}

}  // namespace

Tensor cosine_similarities(const Tensor& f, const Tensor& queries) { return cosine_similarity(f, queries, 1e-12); }

Tensor cluster_focal_loss_from_similarity(const Tensor& similarity, std::size_t label, const LossConfig& cfg) {
  check_label(similarity, label, "cluster_focal_loss");
  const Tensor log_p = pick(log_softmax(scale(similarity, cfg.tau), 0), label);
  Tensor loss = scale(log_p, -cfg.alpha);
  if (cfg.gamma != 0.0) {
    const Tensor one_minus_p = add_scalar(scale(exp(log_p), -1.0), 1.0);
    loss = mul(pow(one_minus_p, cfg.gamma), loss);
  }
  return loss;
}

Tensor cluster_focal_loss(const Tensor& f, const Tensor& queries, std::size_t label, const LossConfig& cfg) {
  return cluster_focal_loss_from_similarity(cosine_similarities(f, queries), label, cfg);
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  check_label(logits, label, "cross_entropy");
  return scale(pick(log_softmax(logits, 0), label), -1.0);
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<std::uint8_t>& mask, std::size_t slot) {
  if (mask.size() != logits.numel()) throw DimensionError("masked_cross_entropy: mask length differs from logits");
  std::size_t active = 0;
  while (active < mask.size() && mask[active]) ++active;
  for (std::size_t s = active; s < mask.size(); ++s)
    if (mask[s]) throw ContractError("masked_cross_entropy: mask is not prefix-packed");
  if (slot >= active) throw LabelError("masked_cross_entropy: slot " + std::to_string(slot) + " is masked");
  return cross_entropy(active == logits.numel() ? logits : slice(logits, 0, active), slot);
}

Tensor binary_cross_entropy(const Tensor& scores, const std::vector<double>& targets) {
  if (scores.numel() != targets.size()) throw DimensionError("binary_cross_entropy: scores and targets differ in length");
  const Tensor t = Tensor::from(scores.shape(), targets);
  const Tensor one_minus_t = Tensor::from(scores.shape(), [&] {
    std::vector<double> v(targets.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - targets[i];
    return v;
  }());
  // −[t·log σ(s) + (1 − t)·log σ(−s)]
  const Tensor ll = add(mul(t, log_sigmoid(scores)), mul(one_minus_t, log_sigmoid(scale(scores, -1.0))));
  return scale(mean(ll), -1.0);
}

LossBreakdown total_loss(const LossInputs& in, const LossConfig& cfg) {
  if (cfg.w_ce1 == 0 && cfg.w_ce2 == 0 && cfg.w_cfl1 == 0 && cfg.w_cfl2 == 0 && cfg.w_bce == 0) {
    throw ConfigError("total_loss: every loss weight is zero");
  }
  LossBreakdown out;
  std::vector<Tensor> terms;
  auto add_term = [&](double weight, double& slot, auto&& compute) {
    if (weight == 0.0) return;
    const Tensor term = compute();
    slot = term.item();
    terms.push_back(weight == 1.0 ? term : scale(term, weight));
  };
  add_term(cfg.w_ce1, out.ce1, [&] { return cross_entropy(in.coarse_logits, in.coarse_label); });
  add_term(cfg.w_ce2, out.ce2, [&] { return cross_entropy(in.fine_logits, in.fine_slot); });
  add_term(cfg.w_cfl1, out.cfl1, [&] { return cluster_focal_loss(in.feature1, in.queries1, in.coarse_label, cfg); });
  add_term(cfg.w_cfl2, out.cfl2, [&] { return cluster_focal_loss(in.feature2, in.queries2, in.fine_slot, cfg); });
  add_term(cfg.w_bce, out.bce, [&] { return binary_cross_entropy(in.camp_scores, in.camp_targets); });
  out.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = add(out.total, terms[i]);
  return out;
}

}  // namespace hiq
