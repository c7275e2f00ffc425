#include "hiq/model.hpp"

#include "hiq/error.hpp"

namespace hiq {

std::vector<Shape> backbone_tap_shapes(const ModelConfig& cfg) {
  std::vector<Shape> shapes;
  std::size_t size = cfg.input_size;
  for (std::size_t width : cfg.backbone_widths) {
    size /= 2;
    shapes.push_back({width, size, size});
  }
  return shapes;
}

namespace {

std::vector<Shape> select(const std::vector<Shape>& all, const std::vector<std::size_t>& taps) {
  std::vector<Shape> out;
  for (auto t : taps) out.push_back(all.at(t - 1));
  return out;
}

std::vector<Tensor> select(const std::vector<Tensor>& all, const std::vector<std::size_t>& taps) {
  std::vector<Tensor> out;
  for (auto t : taps) out.push_back(all.at(t - 1));
  return out;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

HierarchicalModel HierarchicalModel::init(const ModelConfig& cfg, const LabelHierarchy& h, Rng& rng) {
  cfg.validate();
  HierarchicalModel m;
  m.backbone = Backbone::init(cfg, rng);
  const auto shapes = backbone_tap_shapes(cfg);
  m.fusion1 = FusionStack::init(rng, select(shapes, cfg.level1_taps), cfg.d_model, cfg.heads);
  m.fusion2 = FusionStack::init(rng, select(shapes, cfg.level2_taps), cfg.d_model, cfg.heads);
  m.queries = init_random_queries(h, cfg, rng);
  m.decoder1 = LevelDecoder::init(rng, active_query_count(h, 1), cfg.query_channels, cfg.d_model,
                                  cfg.decoder_channels, cfg.heads);
  m.decoder2 = LevelDecoder::init(rng, active_query_count(h, 2), cfg.query_channels, cfg.d_model,
                                  cfg.decoder_channels, cfg.heads);
  m.taps1 = cfg.level1_taps;
  m.taps2 = cfg.level2_taps;
  m.camp = CampParams::init(rng, cfg.query_channels * cfg.query_height * cfg.query_width, cfg.backbone_widths.back(),
                            cfg.camp_dim, cfg.camp_lambda);
  return m;
}

ParamList HierarchicalModel::parameters() const {
  ParamList out;
  backbone.collect(out);
  fusion1.collect(out, "fusion1");
  fusion2.collect(out, "fusion2");
  queries.collect(out);
  decoder1.collect(out, "decoder1");
  decoder2.collect(out, "decoder2");
  camp.collect(out);
  return out;
}

FlatModel FlatModel::init(const ModelConfig& cfg, const LabelHierarchy& h, Rng& rng) {
  cfg.validate();
  FlatModel m;
  m.backbone = Backbone::init(cfg, rng);
  m.head = LinearLayer::init(rng, cfg.backbone_widths.back(), h.num_fine());
  return m;
}

ParamList FlatModel::parameters() const {
  ParamList out;
  backbone.collect(out);
  head.collect(out, "flat.head", ParamGroup::kHead);
  return out;
}

Tensor FlatModel::forward(const Tensor& image) const {
  const Tensor prior = backbone.forward(image).penultimate;
  return reshape(head(reshape(prior, {1, prior.numel()})), {head.weight.dim(1)});
}

std::size_t argmax(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

HierarchicalOutput hierarchical_forward(const Tensor& image, const HierarchicalModel& model, const LabelHierarchy& h,
                                        const ForwardOptions& opts) {
  if (opts.train && !opts.fine_label) throw ContractError("hierarchical_forward: train mode needs a label");
  if (model.queries.q1.size() != h.num_coarse() || model.queries.q2_base.size() != h.max_branching(2)) {
    throw ContractError("hierarchical_forward: model was built for a different hierarchy");
  }
  HierarchicalOutput out;
  const BackboneTaps taps = model.backbone.forward(image);
  const std::size_t n1 = h.num_coarse();

  const Tensor fused1 = progressive_fuse(select(taps.maps, model.taps1), model.fusion1);
  out.feature1 = global_avg_pool(fused1);
  out.coarse_raw = logits_from_decoded(decode_level(model.queries.q1, fused1, model.decoder1), model.decoder1);
  out.coarse_logits = values(out.coarse_raw);

  Tensor camp1;
  if (opts.camp) {
    // Scores are per query, so the coarse block can be computed before the
    // fine level and used to pick the parent at inference.
    camp1 = camp_forward(model.queries.q1, {}, taps.penultimate, model.camp);
    if (!opts.train) out.coarse_logits = camp_refine(out.coarse_logits, values(camp1), model.camp.lambda);
  }

  if (opts.train) {
    out.chosen_coarse = h.parent_of(*opts.fine_label);
  } else {
    out.chosen_coarse = argmax(out.coarse_logits);
  }
  const CoarseSource source = opts.train ? CoarseSource::kGroundTruth : CoarseSource::kPredicted;
  out.fused_queries = fuse_queries(model.queries, h, out.chosen_coarse, source);
  out.mask = h.subclass_mask(out.chosen_coarse);

  const Tensor fused2 = progressive_fuse(select(taps.maps, model.taps2), model.fusion2);
  out.feature2 = global_avg_pool(fused2);
  out.fine_raw = logits_from_decoded(decode_level(out.fused_queries, fused2, model.decoder2), model.decoder2);

  const std::size_t k2 = out.mask.bits.size();
  out.fine_logits_local = values(out.fine_raw);
  if (opts.camp) {
    const Tensor camp2 = camp_forward({}, out.fused_queries, taps.penultimate, model.camp);
    out.camp_raw = concat({camp1, camp2});
    out.camp_scores = values(out.camp_raw);
    if (!opts.train) {
      const std::vector<double> tail(out.camp_scores.begin() + static_cast<std::ptrdiff_t>(n1), out.camp_scores.end());
      out.fine_logits_local = camp_refine(out.fine_logits_local, tail, model.camp.lambda);
    }
  }
  for (std::size_t s = 0; s < k2; ++s)
    if (!out.mask.bits[s]) out.fine_logits_local[s] = kMaskedLogit;

  out.fine_logits_global.assign(h.num_fine(), kMaskedLogit);
  for (std::size_t s = 0; s < out.mask.active(); ++s)
    out.fine_logits_global[out.mask.local_to_global[s]] = out.fine_logits_local[s];
  out.predicted_fine = out.mask.local_to_global[argmax(out.fine_logits_local)];
  return out;
}

LossInputs loss_inputs(const HierarchicalOutput& out, const HierarchicalModel& model, const LabelHierarchy& h,
                       std::size_t fine_label, const LossConfig& cfg) {
  LossInputs in;
  const std::size_t active = out.mask.active();
  in.coarse_logits = out.coarse_raw;
  in.coarse_label = h.parent_of(fine_label);
  if (in.coarse_label != out.chosen_coarse) {
    throw ContractError("loss_inputs: output was not produced with the ground-truth parent");
  }
  in.fine_logits = active == out.fine_raw.numel() ? out.fine_raw : slice(out.fine_raw, 0, active);
  in.fine_slot = h.local_slot(fine_label);
  if (cfg.w_cfl1 != 0.0) {
    std::vector<Tensor> rows;
    for (const auto& q : model.queries.q1) rows.push_back(query_embedding(q, model.decoder1));
    in.feature1 = out.feature1;
    in.queries1 = stack(rows);
  }
  if (cfg.w_cfl2 != 0.0) {
    std::vector<Tensor> rows;
    for (std::size_t s = 0; s < active; ++s) rows.push_back(query_embedding(out.fused_queries[s], model.decoder2));
    in.feature2 = out.feature2;
    in.queries2 = stack(rows);
  }
  if (cfg.w_bce != 0.0) {
    if (!out.camp_raw.defined()) throw ContractError("loss_inputs: CAMP loss requested but CAMP was not run");
    const std::size_t n1 = h.num_coarse();
    // Masked slots carry no query, so they are left out of the BCE.
    in.camp_scores = active == out.mask.bits.size() ? out.camp_raw : slice(out.camp_raw, 0, n1 + active);
    const auto targets = camp_targets(h, in.coarse_label, fine_label);
    in.camp_targets.assign(targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(n1 + active));
  }
  return in;
}

}  // namespace hiq
