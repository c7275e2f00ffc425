#include "hiq/querybank.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "hiq/error.hpp"

namespace hiq {

double QueryBank::beta() const { return 1.0 / (1.0 + std::exp(-beta_logit.item())); }

void QueryBank::collect(ParamList& out) const {
  for (std::size_t c = 0; c < q1.size(); ++c) out.push_back({"queries.q1." + std::to_string(c), q1[c], ParamGroup::kHead});
  for (std::size_t s = 0; s < q2_base.size(); ++s)
    out.push_back({"queries.q2." + std::to_string(s), q2_base[s], ParamGroup::kHead});
  out.push_back({"queries.beta_logit", beta_logit, ParamGroup::kHead});
  proj.collect(out, "queries.proj", ParamGroup::kHead);
}

namespace {

QueryBank empty_bank(const LabelHierarchy& h, const ModelConfig& cfg) {
  QueryBank bank;
  bank.q1.resize(h.num_coarse());
  bank.q2_base.resize(h.max_branching(2));
  bank.beta_logit = Tensor::scalar(0.0, true);
  bank.proj = ConvLayer::identity(cfg.query_channels);
  return bank;
}

// Replicates one h×w map across c channels as a learnable leaf.
Tensor replicate(const std::vector<double>& map, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> values;
  values.reserve(c * map.size());
  for (std::size_t ch = 0; ch < c; ++ch) values.insert(values.end(), map.begin(), map.end());
  return Tensor::from({c, h, w}, std::move(values), true);
}

std::vector<double> mean_of(const std::vector<const std::vector<double>*>& maps) {
  std::vector<double> out(maps.front()->size(), 0.0);
  for (const auto* m : maps)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*m)[i];
  for (auto& v : out) v /= static_cast<double>(maps.size());
  return out;
}

}  // namespace

QueryBank init_random_queries(const LabelHierarchy& h, const ModelConfig& cfg, Rng& rng) {
  QueryBank bank = empty_bank(h, cfg);
  const Shape shape{cfg.query_channels, cfg.query_height, cfg.query_width};
  const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.query_height * cfg.query_width));
  for (auto& q : bank.q1) q = param_normal(rng, shape, stddev);
  for (auto& q : bank.q2_base) q = param_normal(rng, shape, stddev);
  return bank;
}

std::vector<double> downsample_luma(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("downsample_luma expects 1×H×W or 3×H×W, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  const auto px = image.data();
  std::vector<double> luma(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    luma[i] = image.dim(0) == 1 ? px[i] : 0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i];
    if (!std::isfinite(luma[i])) throw DataError("non-finite pixel value in query initialisation image");
  }
  if (h % out_h == 0 && w % out_w == 0) {
    const std::size_t fy = h / out_h, fx = w / out_w;
    std::vector<double> out(out_h * out_w, 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(y / fy) * out_w + x / fx] += luma[y * w + x];
    for (auto& v : out) v /= static_cast<double>(fy * fx);
    return out;
  }
  const Tensor small = bilinear_resize(Tensor::from({1, h, w}, std::move(luma)), out_h, out_w);
  return {small.data().begin(), small.data().end()};
}

std::vector<double> eigen_query_map(const std::vector<std::vector<double>>& samples, std::size_t max_components,
                                    EigenClassReport* report) {
  if (samples.empty()) throw InitError("eigen_query_map: no samples");
  const std::size_t n = samples.size(), d = samples.front().size();
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i].size() != d) throw DimensionError("eigen_query_map: ragged samples");
    for (std::size_t j = 0; j < d; ++j) x(i, j) = samples[i][j];
  }
  if (!x.allFinite()) throw DataError("non-finite pixel value in query initialisation image");
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mu;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(std::max<std::size_t>(n - 1, 1));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  // Eigen returns ascending order.
  std::vector<double> lambda(d);
  for (std::size_t j = 0; j < d; ++j) lambda[j] = std::max(0.0, solver.eigenvalues()(static_cast<Eigen::Index>(d - 1 - j)));

  EigenClassReport local;
  EigenClassReport& rep = report ? *report : local;
  rep.eigenvalues = lambda;
  const std::size_t m = std::min({n - 1, d, max_components});
  const double scale = 1.0 + x.squaredNorm() / static_cast<double>(n * d);
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) total += lambda[j];

  std::vector<double> out(d, 0.0);
  if (m == 0 || lambda[0] <= 1e-12 * scale) {
    rep.retained = 0;
    rep.fallback = true;
    const double norm = mu.norm();
    if (norm > 0.0)
      for (std::size_t j = 0; j < d; ++j) out[j] = mu(static_cast<Eigen::Index>(j)) / norm;
    return out;
  }
  rep.retained = m;
  rep.fallback = false;
  for (std::size_t j = 0; j < m; ++j) {
    Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - j));
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0) v = -v;
    const double weight = lambda[j] / total;
    for (std::size_t i = 0; i < d; ++i) out[i] += weight * v(static_cast<Eigen::Index>(i));
  }
  return out;
}

std::pair<QueryBank, EigenInitReport> init_eigen_queries(const std::vector<std::vector<Tensor>>& images,
                                                         const LabelHierarchy& h, const ModelConfig& cfg) {
  if (images.size() != h.num_fine()) {
    throw InitError("query initialisation got images for " + std::to_string(images.size()) + " classes, taxonomy has " +
                    std::to_string(h.num_fine()));
  }
  const std::size_t qh = cfg.query_height, qw = cfg.query_width, qc = cfg.query_channels;
  std::vector<std::vector<double>> fine_maps(h.num_fine());
  EigenInitReport report(h.num_fine());
  for (std::size_t f = 0; f < h.num_fine(); ++f) {
    if (images[f].empty()) throw InitError("fine class '" + h.fine_name(f) + "' has no images for query initialisation");
    std::vector<std::vector<double>> samples;
    samples.reserve(images[f].size());
    for (const auto& img : images[f]) samples.push_back(downsample_luma(img, qh, qw));
    fine_maps[f] = eigen_query_map(samples, cfg.max_components, &report[f]);
  }

  QueryBank bank = empty_bank(h, cfg);
  for (std::size_t c = 0; c < h.num_coarse(); ++c) {
    std::vector<const std::vector<double>*> kids;
    for (auto f : h.children(c)) kids.push_back(&fine_maps[f]);
    bank.q1[c] = replicate(mean_of(kids), qc, qh, qw);
  }
  for (std::size_t s = 0; s < bank.q2_base.size(); ++s) {
    std::vector<const std::vector<double>*> occupants;
    for (std::size_t f = 0; f < h.num_fine(); ++f)
      if (h.local_slot(f) == s) occupants.push_back(&fine_maps[f]);
    bank.q2_base[s] = replicate(mean_of(occupants), qc, qh, qw);
  }
  return {std::move(bank), std::move(report)};
}

Tensor project_coarse_query(const QueryBank& bank, std::size_t coarse_id) {
  if (coarse_id >= bank.q1.size()) {
    throw LabelError("coarse id " + std::to_string(coarse_id) + " outside [0, " + std::to_string(bank.q1.size()) + ")");
  }
  return bank.proj(bank.q1[coarse_id]);
}

std::vector<Tensor> fuse_queries(const QueryBank& bank, const LabelHierarchy& h, std::size_t coarse_id,
                                 CoarseSource /*source*/) {
  const auto mask = h.subclass_mask(coarse_id);
  const Tensor projected = project_coarse_query(bank, coarse_id);
  const Tensor beta = sigmoid(bank.beta_logit);
  const Tensor parent_part = mul(add_scalar(scale(beta, -1.0), 1.0), projected);
  std::vector<Tensor> out;
  out.reserve(bank.q2_base.size());
  for (std::size_t s = 0; s < bank.q2_base.size(); ++s) {
    if (mask.bits[s]) {
      out.push_back(add(mul(beta, bank.q2_base[s]), parent_part));
    } else {
      out.push_back(Tensor::zeros(bank.q2_base[s].shape()));
    }
  }
  return out;
}

std::size_t active_query_count(const LabelHierarchy& h, std::size_t level) { return h.max_branching(level); }

}  // namespace hiq
