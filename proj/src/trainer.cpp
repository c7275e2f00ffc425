#include "hiq/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "hiq/util.hpp"

namespace hiq {

using nlohmann::ordered_json;

ParamList TrainedModel::parameters() const { return is_flat() ? flat.parameters() : hier.parameters(); }

namespace {

ordered_json loss_json(const LossSummary& l) {
  return {{"total", l.total}, {"ce1", l.ce1}, {"ce2", l.ce2}, {"cfl1", l.cfl1}, {"cfl2", l.cfl2}, {"bce", l.bce}};
}

ordered_json record_json(const MetricsRecord& r) {
  ordered_json j{{"schema", kMetricsSchemaVersion},
                 {"type", r.type},
                 {"step", r.step},
                 {"epoch", r.epoch},
                 {"seed", r.seed},
                 {"loss", loss_json(r.loss)},
                 {"coarse_acc", r.coarse_acc},
                 {"fine_acc_conditional", r.fine_acc_conditional},
                 {"fine_acc_absolute", r.fine_acc_absolute},
                 {"samples", r.samples}};
  if (r.wall_clock_s) j["wall_clock_s"] = *r.wall_clock_s;
  return j;
}

std::string describe(const MetricsRecord& r) {
  std::ostringstream s;
  s << "epoch " << r.epoch << " step " << r.step << " loss " << r.loss.total << " coarse_acc " << r.coarse_acc
    << " fine_acc_conditional " << r.fine_acc_conditional;
  return s.str();
}

}  // namespace

std::string to_json_line(const MetricsRecord& r) { return record_json(r).dump(); }

std::string to_json_line(const EigenInitReport& report, const LabelHierarchy& h) {
  ordered_json classes = ordered_json::array();
  for (std::size_t f = 0; f < report.size(); ++f) {
    classes.push_back({{"fine", h.fine_name(f)},
                       {"retained", report[f].retained},
                       {"fallback", report[f].fallback},
                       {"eigenvalues", report[f].eigenvalues}});
  }
  return ordered_json{{"schema", kMetricsSchemaVersion}, {"type", "eigen_init"}, {"classes", classes}}.dump();
}

MetricsRecord score_predictions(const std::vector<Prediction>& preds) {
  if (preds.empty()) throw DataError("cannot evaluate on an empty dataset");
  std::size_t coarse_ok = 0, both_ok = 0;
  for (const auto& p : preds) {
    if (p.coarse_pred == p.coarse_true) {
      ++coarse_ok;
      if (p.fine_pred == p.fine_true) ++both_ok;
    }
  }
  MetricsRecord r;
  const double n = static_cast<double>(preds.size());
  r.samples = preds.size();
  r.coarse_acc = static_cast<double>(coarse_ok) / n;
  r.fine_acc_conditional = coarse_ok == 0 ? 0.0 : static_cast<double>(both_ok) / static_cast<double>(coarse_ok);
  r.fine_acc_absolute = static_cast<double>(both_ok) / n;
  return r;
}

PreparedData prepare_data(const TrainConfig& cfg, std::size_t threads) {
  if (cfg.data.source == "synthetic") {
    SynthConfig synth = cfg.data.synth;
    auto gen = generate_synthetic(synth, threads);
    if (synth.image_size != cfg.arch.input_size) {
      for (auto* split : {&gen.train, &gen.test})
        for (auto& s : *split) s.image = bilinear_resize(s.image, cfg.arch.input_size, cfg.arch.input_size);
    }
    return {std::move(gen.hierarchy), std::move(gen.train), std::move(gen.test)};
  }
  if (cfg.data.taxonomy.empty() || cfg.data.train_manifest.empty()) {
    throw ConfigError("manifest data needs data.taxonomy and data.train_manifest");
  }
  auto h = LabelHierarchy::load(cfg.data.taxonomy);
  Dataset train = load_manifest(cfg.data.train_manifest, h, cfg.data.image_root, cfg.arch.input_size);
  Dataset test = cfg.data.test_manifest.empty()
                     ? Dataset{}
                     : load_manifest(cfg.data.test_manifest, h, cfg.data.image_root, cfg.arch.input_size);
  return {std::move(h), std::move(train), std::move(test)};
}

TrainedModel initial_model(const TrainConfig& cfg, const LabelHierarchy& h, const NormStats& stats) {
  TrainedModel m{cfg, h, stats, {}, {}};
  Rng rng(cfg.seed);
  if (m.is_flat()) {
    m.flat = FlatModel::init(cfg.arch, h, rng);
  } else {
    m.hier = HierarchicalModel::init(cfg.arch, h, rng);
  }
  return m;
}

std::vector<Prediction> predict(const TrainedModel& model, const Dataset& data) {
  NoGradGuard no_grad;
  const LabelHierarchy& h = model.hierarchy;
  std::vector<Prediction> preds;
  preds.reserve(data.size());
  for (const auto& s : data) {
    const Tensor x = model.stats.apply(s.image);
    Prediction p{0, 0, s.coarse_label, s.fine_label};
    if (model.is_flat()) {
      const Tensor logits = model.flat.forward(x);
      p.fine_pred = argmax({logits.data().begin(), logits.data().end()});
      p.coarse_pred = h.parent_of(p.fine_pred);
    } else {
      const auto out = hierarchical_forward(x, model.hier, h, {std::nullopt, false, model.cfg.flags.camp});
      p.coarse_pred = out.chosen_coarse;
      p.fine_pred = out.predicted_fine;
    }
    preds.push_back(p);
  }
  return preds;
}

MetricsRecord evaluate(const TrainedModel& model, const LabelHierarchy& h, const Dataset& data) {
  if (h.digest() != model.hierarchy.digest()) {
    throw ContractError("evaluate: dataset hierarchy does not match the model's hierarchy");
  }
  MetricsRecord r = score_predictions(predict(model, data));
  r.seed = model.cfg.seed;
  return r;
}

TrainResult train(const TrainConfig& cfg, const LabelHierarchy& h, const Dataset& train_set,
                  const TrainOptions& opts) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training split is empty");
  const auto wall_start = std::chrono::steady_clock::now();
  TrainResult result;
  auto emit = [&](std::string line) {
    if (opts.on_line) opts.on_line(line);
    result.metrics_lines.push_back(std::move(line));
  };

  const NormStats stats = NormStats::compute(train_set);
  result.model = initial_model(cfg, h, stats);
  TrainedModel& model = result.model;
  const std::vector<Tensor> images = normalize_batch(train_set, stats);

  if (!model.is_flat() && cfg.flags.eigen_init) {
    std::vector<std::vector<Tensor>> per_class(h.num_fine());
    for (std::size_t i = 0; i < train_set.size(); ++i) per_class[train_set[i].fine_label].push_back(images[i]);
    auto [bank, report] = init_eigen_queries(per_class, h, cfg.arch);
    // Fusion parameters keep their defaults; only the maps change.
    model.hier.queries.q1 = std::move(bank.q1);
    model.hier.queries.q2_base = std::move(bank.q2_base);
    result.eigen_report = std::move(report);
    emit(to_json_line(result.eigen_report, h));
  }

  ParamList params = model.parameters();
  std::vector<std::vector<double>> velocity;
  velocity.reserve(params.size());
  for (const auto& p : params) velocity.emplace_back(p.tensor.numel(), 0.0);

  const LossConfig loss_cfg = cfg.effective_loss();
  const bool use_camp = cfg.flags.camp;
  Rng order_rng(Rng::splitmix64(cfg.seed) ^ 0x6f72646572ULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  MetricsRecord last_finite;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    LossSummary sums;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      for (auto& p : params) p.tensor.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        Tensor x = images[idx];
        if (cfg.data.hflip && order_rng.uniform() < 0.5) x = hflip(x);
        const std::size_t fine = train_set[idx].fine_label;
        LossBreakdown lb;
        if (model.is_flat()) {
          lb.total = cross_entropy(model.flat.forward(x), fine);
          lb.ce2 = lb.total.item();
        } else {
          const auto out = hierarchical_forward(x, model.hier, h, {fine, true, use_camp});
          lb = total_loss(loss_inputs(out, model.hier, h, fine, loss_cfg), loss_cfg);
        }
        const double value = lb.total.item();
        if (!std::isfinite(value)) {
          throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step) + " (epoch " +
                                std::to_string(epoch) + "); last finite metrics: " +
                                (last_finite.epoch ? describe(last_finite) : std::string("none")));
        }
        sums.total += value;
        sums.ce1 += lb.ce1;
        sums.ce2 += lb.ce2;
        sums.cfl1 += lb.cfl1;
        sums.cfl2 += lb.cfl2;
        sums.bce += lb.bce;
        scale(lb.total, inv_batch).backward();
      }

      double factor = 1.0;
      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& p : params)
          if (p.tensor.has_grad())
            for (double g : p.tensor.grad()) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) factor = cfg.grad_clip / norm;
      }
      for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& t = params[k].tensor;
        const double lr = cfg.lr * (params[k].group == ParamGroup::kBackbone ? cfg.backbone_lr_mult : 1.0);
        auto& v = velocity[k];
        auto w = t.mutable_data();
        const bool has = t.has_grad();
        const auto g = t.grad();
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = cfg.momentum * v[i] + (has ? factor * g[i] : 0.0);
          w[i] -= lr * v[i];
        }
      }
      ++step;
    }

    const double n = static_cast<double>(train_set.size());
    MetricsRecord rec = evaluate(model, h, opts.eval_set ? *opts.eval_set : train_set);
    rec.type = "epoch";
    rec.epoch = epoch;
    rec.step = step;
    rec.seed = cfg.seed;
    rec.loss = {sums.total / n, sums.ce1 / n, sums.ce2 / n, sums.cfl1 / n, sums.cfl2 / n, sums.bce / n};
    if (cfg.log_wall_clock) {
      rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    }
    last_finite = rec;
    result.epochs.push_back(rec);
    emit(to_json_line(rec));
  }
  for (auto& p : params) p.tensor.zero_grad();
  return result;
}

std::vector<AblationVariant> ablation_variants() {
  return {
      {"Base", "hierarchical", {false, false, false}},
      {"Base+CFL", "hierarchical", {true, false, false}},
      {"Base+CFL+Eigen", "hierarchical", {true, true, false}},
      {"Base+CFL+CAMP", "hierarchical", {true, false, true}},
      {"Base+CFL+CAMP+Eigen", "hierarchical", {true, true, true}},
      {"Flat", "flat", {false, false, false}},
  };
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ordered_json row_json(const AblationRow& r) {
  return {{"variant", r.variant},
          {"seed", r.seed},
          {"coarse_acc", r.metrics.coarse_acc},
          {"fine_acc_conditional", r.metrics.fine_acc_conditional},
          {"fine_acc_absolute", r.metrics.fine_acc_absolute},
          {"samples", r.metrics.samples}};
}

}  // namespace

AblationReport run_ablation(const TrainConfig& base, const PreparedData& data, const std::vector<std::uint64_t>& seeds,
                            std::size_t threads) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const Dataset& eval_set = data.test.empty() ? data.train : data.test;
  const auto variants = ablation_variants();
  struct Job {
    TrainConfig cfg;
    std::string variant;
  };
  std::vector<Job> jobs;
  for (const auto& v : variants)
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.model = v.model;
      cfg.flags = v.flags;
      cfg.seed = seed;
      cfg.validate();
      jobs.push_back({cfg, v.name});
    }

  AblationReport report;
  report.rows.resize(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  auto run_job = [&](std::size_t i) {
    try {
      const auto result = train(jobs[i].cfg, data.hierarchy, data.train, {&eval_set, {}});
      report.rows[i] = {jobs[i].variant, jobs[i].cfg.seed, evaluate(result.model, data.hierarchy, eval_set)};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_job(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < jobs.size(); i += threads) run_job(i);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (const auto& v : variants) {
    std::vector<double> c, fc, fa;
    for (const auto& r : report.rows)
      if (r.variant == v.name) {
        c.push_back(r.metrics.coarse_acc);
        fc.push_back(r.metrics.fine_acc_conditional);
        fa.push_back(r.metrics.fine_acc_absolute);
      }
    MetricsRecord m;
    m.type = "median";
    m.coarse_acc = median(c);
    m.fine_acc_conditional = median(fc);
    m.fine_acc_absolute = median(fa);
    m.samples = eval_set.size();
    report.medians.push_back({v.name, 0, m});
  }
  return report;
}

const AblationRow& AblationReport::median(const std::string& variant) const {
  for (const auto& m : medians)
    if (m.variant == variant) return m;
  throw ContractError("no ablation variant named '" + variant + "'");
}

std::string AblationReport::to_json() const {
  ordered_json j{{"schema", kMetricsSchemaVersion}, {"rows", ordered_json::array()}, {"medians", ordered_json::array()}};
  for (const auto& r : rows) j["rows"].push_back(row_json(r));
  for (const auto& m : medians) {
    auto mj = row_json(m);
    mj.erase("seed");
    j["medians"].push_back(mj);
  }
  return j.dump(2);
}

std::string AblationReport::to_table() const {
  std::ostringstream s;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-22s %6s %10s %10s %10s\n", "variant", "seed", "coarse", "fine|coarse", "fine");
  s << buf;
  auto line = [&](const AblationRow& r, const std::string& seed) {
    std::snprintf(buf, sizeof buf, "%-22s %6s %10.4f %10.4f %10.4f\n", r.variant.c_str(), seed.c_str(),
                  r.metrics.coarse_acc, r.metrics.fine_acc_conditional, r.metrics.fine_acc_absolute);
    s << buf;
  };
  for (const auto& r : rows) line(r, std::to_string(r.seed));
  for (const auto& m : medians) line(m, "median");
  return s.str();
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("HIQ_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace hiq
