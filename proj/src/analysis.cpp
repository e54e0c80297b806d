#include "msae/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "msae/error.hpp"
#include "msae/linalg.hpp"
#include "msae/trainer.hpp"

namespace msae {

double fvu(const Matrix& x, const Matrix& xhat) {
  if (x.rows() != xhat.rows() || x.cols() != xhat.cols()) {
    throw ShapeError("fvu: X is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                     ", Xhat is " + std::to_string(xhat.rows()) + "x" +
                     std::to_string(xhat.cols()));
  }
  if (x.rows() == 0) throw RangeError("fvu: empty input");
  const Matrix mean = column_means(x);
  double num = 0.0;
  double den = 0.0;
  for (std::size_t b = 0; b < x.rows(); ++b) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double r = x(b, c) - xhat(b, c);
      const double v = x(b, c) - mean(0, c);
      num += r * r;
      den += v * v;
    }
  }
  if (den == 0.0) throw NumericError("fvu: input has zero variance");
  return num / den;
}

double MatchResult::min_cosine() const {
  if (cosine.empty()) return 0.0;
  return *std::min_element(cosine.begin(), cosine.end());
}

std::size_t MatchResult::count_at_least(double threshold) const {
  return static_cast<std::size_t>(
      std::count_if(cosine.begin(), cosine.end(), [&](double c) { return c >= threshold; }));
}

double MatchResult::mean_offdiag_abs() const {
  const std::size_t l = latent_for_feature.size();
  if (l < 2) return 0.0;
  double acc = 0.0;
  for (std::size_t f = 0; f < l; ++f) {
    for (std::size_t g = 0; g < l; ++g) {
      if (f != g) acc += std::abs(similarity(f, latent_for_feature[g]));
    }
  }
  return acc / static_cast<double>(l * (l - 1));
}

MatchResult match_latents(const SaeParams& params, const FeatureTree& tree) {
  if (params.input_dim() != tree.dim()) {
    throw ShapeError("match_latents: SAE input dim " + std::to_string(params.input_dim()) +
                     " != tree dim " + std::to_string(tree.dim()));
  }
  if (params.dict_size() < tree.num_features()) {
    throw ShapeError("match_latents: " + std::to_string(params.dict_size()) + " latents for " +
                     std::to_string(tree.num_features()) + " features");
  }
  MatchResult r;
  r.similarity = cosine_sim_matrix(tree.directions(), params.w_dec);
  Matrix cost = r.similarity;
  for (auto& v : cost.values()) v = 1.0 - v;
  r.latent_for_feature = hungarian_match(cost);
  std::vector<std::uint8_t> used(params.dict_size(), 0);
  for (std::size_t f = 0; f < r.latent_for_feature.size(); ++f) {
    r.cosine.push_back(r.similarity(f, r.latent_for_feature[f]));
    used[r.latent_for_feature[f]] = 1;
  }
  for (std::size_t j = 0; j < used.size(); ++j) {
    if (!used[j]) r.unmatched_latents.push_back(j);
  }
  return r;
}

nlohmann::json to_json(const MatchResult& m) {
  return {{"latent_for_feature", m.latent_for_feature},
          {"cosine", m.cosine},
          {"unmatched_latents", m.unmatched_latents},
          {"min_cosine", m.min_cosine()},
          {"mean_offdiag_abs", m.mean_offdiag_abs()}};
}

void write_heatmap_csv(std::ostream& out, const MatchResult& m) {
  std::vector<std::size_t> order = m.latent_for_feature;
  order.insert(order.end(), m.unmatched_latents.begin(), m.unmatched_latents.end());
  out << "feature";
  for (auto j : order) out << ",latent_" << j;
  out << '\n';
  for (std::size_t f = 0; f < m.similarity.rows(); ++f) {
    out << "feature_" << f;
    for (auto j : order) out << ',' << m.similarity(f, j);
    out << '\n';
  }
}

EncodeMode eval_mode(const ActivationCfg& cfg) {
  if (cfg.kind == ActivationKind::kBatchTopK && !cfg.threshold) return EncodeMode::kTrain;
  return EncodeMode::kInference;
}

AbsorptionResult absorption_rate(const SaeParams& params, const ActivationCfg& cfg,
                                 const FeatureTree& tree, const std::vector<ToyBatch>& eval,
                                 const AbsorptionOptions& opts) {
  return absorption_rate(params, cfg, tree, match_latents(params, tree), eval, opts);
}

AbsorptionResult absorption_rate(const SaeParams& params, const ActivationCfg& cfg,
                                 const FeatureTree& tree, const MatchResult& match,
                                 const std::vector<ToyBatch>& eval,
                                 const AbsorptionOptions& opts) {
  AbsorptionResult res;
  res.min_matched_cosine = match.min_cosine();
  if (res.min_matched_cosine < opts.min_match_cosine) {
    res.reliable = false;
    res.note = "matching gate failed: min matched cosine " + std::to_string(res.min_matched_cosine) +
               " < " + std::to_string(opts.min_match_cosine);
  }
  const std::size_t nf = tree.num_features();
  for (std::size_t c = 0; c < nf; ++c) {
    if (tree.parent(c) == FeatureTree::kRoot) continue;
    EdgeAbsorption e;
    e.parent = static_cast<std::size_t>(tree.parent(c));
    e.child = c;
    e.parent_latent = match.latent_for_feature[e.parent];
    e.child_latent = match.latent_for_feature[c];
    res.edges.push_back(e);
  }
  std::vector<std::size_t> absorbed(res.edges.size(), 0);
  for (const auto& batch : eval) {
    const Matrix f = encode(params, cfg, batch.x, eval_mode(cfg));
    for (std::size_t b = 0; b < f.rows(); ++b) {
      for (std::size_t i = 0; i < res.edges.size(); ++i) {
        auto& e = res.edges[i];
        if (!batch.is_active(b, e.child)) continue;
        ++e.child_active;
        if (f(b, e.child_latent) > opts.fire_eps && f(b, e.parent_latent) <= opts.fire_eps) {
          ++absorbed[i];
        }
      }
    }
  }
  double acc = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < res.edges.size(); ++i) {
    auto& e = res.edges[i];
    if (e.child_active == 0) continue;
    e.rate = static_cast<double>(absorbed[i]) / static_cast<double>(e.child_active);
    acc += e.rate;
    ++counted;
  }
  res.aggregate = counted ? acc / static_cast<double>(counted) : 0.0;
  if (counted < res.edges.size()) {
    if (!res.note.empty()) res.note += "; ";
    res.note += std::to_string(res.edges.size() - counted) +
                " edge(s) had no active child samples and are excluded from the aggregate";
  }
  return res;
}

nlohmann::json to_json(const AbsorptionResult& a) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : a.edges) {
    edges.push_back({{"parent", e.parent},
                     {"child", e.child},
                     {"parent_latent", e.parent_latent},
                     {"child_latent", e.child_latent},
                     {"child_active", e.child_active},
                     {"rate", e.rate}});
  }
  return {{"aggregate", a.aggregate},
          {"reliable", a.reliable},
          {"min_matched_cosine", a.min_matched_cosine},
          {"note", a.note},
          {"edges", edges}};
}

double avg_max_cosine(const SaeParams& params) {
  const std::size_t m = params.dict_size();
  if (m < 2) throw RangeError("avg_max_cosine: needs at least 2 latents");
  const Matrix sim = cosine_sim_matrix(params.w_dec, params.w_dec);
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i) best = std::max(best, sim(i, j));
    }
    acc += best;
  }
  return acc / static_cast<double>(m);
}

std::vector<std::size_t> default_group_bounds(const PrefixSchedule& schedule, std::size_t m) {
  if (schedule.kind == PrefixKind::kFixed && !schedule.sizes.empty() &&
      schedule.sizes.back() == m) {
    return schedule.sizes;
  }
  std::vector<std::size_t> out;
  for (std::size_t q = 1; q <= 4; ++q) {
    const std::size_t b = std::max<std::size_t>(1, q * m / 4);
    if (out.empty() || b > out.back()) out.push_back(b);
  }
  if (out.back() != m) out.push_back(m);
  return out;
}

LatentFrequency latent_frequency(const SaeParams& params, const ActivationCfg& cfg,
                                 const std::vector<Matrix>& eval,
                                 std::vector<std::size_t> group_bounds, double fire_eps) {
  const std::size_t m = params.dict_size();
  LatentFrequency out;
  if (group_bounds.empty()) group_bounds = {m};
  for (std::size_t i = 0; i < group_bounds.size(); ++i) {
    if (group_bounds[i] < 1 || group_bounds[i] > m ||
        (i > 0 && group_bounds[i] <= group_bounds[i - 1])) {
      throw RangeError("latent_frequency: group bounds must ascend within [1, m]");
    }
  }
  if (group_bounds.back() != m) throw RangeError("latent_frequency: last group bound must be m");
  std::vector<std::uint64_t> counts(m, 0);
  for (const auto& x : eval) {
    const Matrix f = encode(params, cfg, x, eval_mode(cfg));
    for (std::size_t b = 0; b < f.rows(); ++b) {
      for (std::size_t j = 0; j < m; ++j) {
        if (f(b, j) > fire_eps) ++counts[j];
      }
    }
    out.tokens += x.rows();
  }
  out.per_latent.resize(m, 0.0);
  if (out.tokens > 0) {
    for (std::size_t j = 0; j < m; ++j) {
      out.per_latent[j] = static_cast<double>(counts[j]) / static_cast<double>(out.tokens);
    }
  }
  std::size_t lo = 0;
  for (auto hi : group_bounds) {
    double acc = 0.0;
    for (std::size_t j = lo; j < hi; ++j) acc += out.per_latent[j];
    out.group_means.push_back(acc / static_cast<double>(hi - lo));
    lo = hi;
  }
  out.group_bounds = std::move(group_bounds);
  return out;
}

nlohmann::json to_json(const LatentFrequency& f) {
  return {{"per_latent", f.per_latent},
          {"group_bounds", f.group_bounds},
          {"group_means", f.group_means},
          {"tokens", f.tokens}};
}

void write_frequency_csv(std::ostream& out, const LatentFrequency& f) {
  out << "latent,group,frequency\n";
  std::size_t g = 0;
  for (std::size_t j = 0; j < f.per_latent.size(); ++j) {
    while (g < f.group_bounds.size() && j >= f.group_bounds[g]) ++g;
    out << j << ',' << g << ',' << f.per_latent[j] << '\n';
  }
}

MetaProbeResult meta_sae_probe(const SaeParams& params, Rng& rng, const MetaSaeOptions& opts) {
  const std::size_t m = params.dict_size();
  if (m < 8) throw RangeError("meta_sae_probe: needs at least 8 latents");
  Matrix rows = params.w_dec;
  normalize_rows(rows);

  MetaProbeResult res;
  const Matrix mean = column_means(rows);
  double var = 0.0;
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    for (std::size_t c = 0; c < rows.cols(); ++c) {
      const double d = rows(i, c) - mean(0, c);
      var += d * d;
    }
  }
  if (var <= 1e-12 * static_cast<double>(rows.size())) {
    res.degenerate = true;
    res.note = "decoder rows have (near) zero variance; meta FVU undefined";
    return res;
  }

  const std::size_t meta_m = std::max<std::size_t>(1, m / opts.size_divisor);
  TrainConfig cfg;
  cfg.steps = opts.steps;
  cfg.batch_size = m;
  cfg.dict_size = meta_m;
  cfg.lr = opts.lr;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.seed = rng.next_u64();
  cfg.schedule = PrefixSchedule::vanilla(meta_m);
  cfg.loss.aux_coeff = 0.0;
  cfg.activation.kind = ActivationKind::kBatchTopK;
  cfg.activation.k = std::min(opts.k, meta_m);
  cfg.sparsity.enabled = false;
  cfg.log_every = std::max<std::size_t>(1, opts.steps);

  const TrainResult trained = train_loop(replay_sampler(rows), rows.cols(), cfg, 0.0);
  const Matrix f = encode(trained.state.params, cfg.activation, rows, EncodeMode::kTrain);
  const double u = fvu(rows, decode(trained.state.params, f));
  res.fvu = u;
  res.variance_explained = 1.0 - u;
  return res;
}

nlohmann::json to_json(const MetaProbeResult& r) {
  nlohmann::json j;
  j["fvu"] = r.fvu ? nlohmann::json(*r.fvu) : nlohmann::json(nullptr);
  j["variance_explained"] =
      r.variance_explained ? nlohmann::json(*r.variance_explained) : nlohmann::json(nullptr);
  j["degenerate"] = r.degenerate;
  j["note"] = r.note;
  return j;
}

Raster activation_raster(const FeatureTree& tree, const ToyBatch& batch,
                         const std::vector<RasterModel>& models) {
  const std::size_t nf = tree.num_features();
  const std::size_t rows = batch.x.rows();
  Raster r;
  r.values = Matrix(rows, nf * (1 + models.size()));
  for (std::size_t f = 0; f < nf; ++f) r.header.push_back("gt_" + std::to_string(f));
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t f = 0; f < nf; ++f) r.values(b, f) = batch.is_active(b, f) ? 1.0 : 0.0;
  }
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    const auto& model = models[mi];
    const MatchResult match = match_latents(*model.params, tree);
    for (std::size_t f = 0; f < nf; ++f) {
      r.header.push_back(model.name + "_f" + std::to_string(f) + "_l" +
                         std::to_string(match.latent_for_feature[f]));
    }
    if (rows == 0) continue;
    const Matrix acts = encode(*model.params, model.cfg, batch.x, eval_mode(model.cfg));
    for (std::size_t b = 0; b < rows; ++b) {
      for (std::size_t f = 0; f < nf; ++f) {
        r.values(b, nf * (1 + mi) + f) = acts(b, match.latent_for_feature[f]);
      }
    }
  }
  return r;
}

void write_raster_csv(std::ostream& out, const Raster& r) {
  out << "sample";
  for (const auto& h : r.header) out << ',' << h;
  out << '\n';
  for (std::size_t b = 0; b < r.values.rows(); ++b) {
    out << b;
    for (std::size_t c = 0; c < r.values.cols(); ++c) out << ',' << r.values(b, c);
    out << '\n';
  }
}

SaeParams ground_truth_params(const FeatureTree& tree) {
  SaeParams p;
  p.w_dec = tree.directions();
  p.w_enc = tree.directions();
  p.b_enc = Matrix(1, tree.num_features());
  p.b_dec = Matrix(1, tree.dim());
  return p;
}

std::vector<ToyBatch> eval_stream(const FeatureTree& tree, std::size_t samples, std::size_t batch,
                                  Rng& rng) {
  if (batch == 0) throw RangeError("eval_stream: batch must be >= 1");
  std::vector<ToyBatch> out;
  for (std::size_t done = 0; done < samples; done += batch) {
    out.push_back(sample_batch(tree, std::min(batch, samples - done), rng));
  }
  return out;
}

AnalysisReport analyze(const SaeParams& params, const ActivationCfg& cfg, const FeatureTree& tree,
                       const AnalysisOptions& opts) {
  if (params.input_dim() != tree.dim()) {
    throw ShapeError("analyze: checkpoint input dim " + std::to_string(params.input_dim()) +
                     " does not match tree dim " + std::to_string(tree.dim()));
  }
  const Rng root(opts.seed);
  Rng data_rng = root.fork(10);
  const auto stream = eval_stream(tree, opts.eval_samples, opts.eval_batch, data_rng);

  AnalysisReport r;
  std::vector<Matrix> xs;
  double sq_err = 0.0;
  double l0_acc = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : stream) xs.push_back(b.x);

  // FVU over the whole stream against the stream-wide column mean.
  Matrix mean(1, tree.dim());
  for (const auto& x : xs) mean += column_sums(x);
  for (const auto& x : xs) tokens += x.rows();
  if (tokens == 0) throw RangeError("analyze: empty eval stream");
  mean *= 1.0 / static_cast<double>(tokens);
  double var = 0.0;
  for (const auto& x : xs) {
    const Matrix f = encode(params, cfg, x, eval_mode(cfg));
    const Matrix xhat = decode(params, f);
    l0_acc += mean_l0(f) * static_cast<double>(x.rows());
    for (std::size_t b = 0; b < x.rows(); ++b) {
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double e = x(b, c) - xhat(b, c);
        const double v = x(b, c) - mean(0, c);
        sq_err += e * e;
        var += v * v;
      }
    }
  }
  if (var == 0.0) throw NumericError("analyze: eval stream has zero variance");
  r.fvu = sq_err / var;
  r.l0_mean = l0_acc / static_cast<double>(tokens);
  r.avg_max_cos = params.dict_size() >= 2 ? avg_max_cosine(params) : 0.0;
  r.match = match_latents(params, tree);
  r.absorption = absorption_rate(params, cfg, tree, r.match, stream, opts.absorption);
  r.latent_freq = latent_frequency(params, cfg, xs, opts.group_bounds, opts.absorption.fire_eps);
  if (opts.run_meta && params.dict_size() >= 8) {
    Rng meta_rng = root.fork(11);
    r.meta = meta_sae_probe(params, meta_rng, opts.meta);
  }
  return r;
}

nlohmann::json to_json(const AnalysisReport& r) {
  nlohmann::json j;
  j["fvu"] = r.fvu;
  j["l0_mean"] = r.l0_mean;
  j["avg_max_cos"] = r.avg_max_cos;
  j["absorption_rate"] = to_json(r.absorption);
  j["match"] = to_json(r.match);
  j["latent_freq"] = to_json(r.latent_freq);
  if (r.meta) {
    j["meta_sae"] = to_json(*r.meta);
    j["meta_sae_fvu"] = r.meta->fvu ? nlohmann::json(*r.meta->fvu) : nlohmann::json(nullptr);
  } else {
    j["meta_sae_fvu"] = nullptr;
  }
  return j;
}

}  // namespace msae
