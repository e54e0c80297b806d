#include "msae/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msae/error.hpp"

namespace msae {

PrefixSchedule PrefixSchedule::fixed(std::vector<std::size_t> sizes) {
  PrefixSchedule s;
  s.kind = PrefixKind::kFixed;
  s.dict_size = sizes.empty() ? 0 : sizes.back();
  s.sizes = std::move(sizes);
  s.validate();
  return s;
}

PrefixSchedule PrefixSchedule::random(std::size_t dict_size, std::size_t samples_per_batch,
                                      double pareto_shape) {
  PrefixSchedule s;
  s.kind = PrefixKind::kRandom;
  s.dict_size = dict_size;
  s.samples_per_batch = samples_per_batch;
  s.pareto_shape = pareto_shape;
  s.validate();
  return s;
}

PrefixSchedule PrefixSchedule::vanilla(std::size_t dict_size) { return fixed({dict_size}); }

void PrefixSchedule::validate() const {
  if (dict_size == 0) throw ConfigError("prefix schedule: dictionary size must be >= 1");
  if (kind == PrefixKind::kFixed) {
    if (sizes.empty()) throw ConfigError("prefix schedule: fixed schedule needs sizes");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] == 0 || (i > 0 && sizes[i] <= sizes[i - 1])) {
        throw ConfigError("prefix schedule: fixed sizes must be positive and strictly ascending");
      }
    }
    if (sizes.back() != dict_size) {
      throw ConfigError("prefix schedule: last size must equal the dictionary size");
    }
  } else {
    if (samples_per_batch < 1) throw ConfigError("prefix schedule: samples_per_batch must be >= 1");
    if (!(pareto_shape > 0.0)) throw ConfigError("prefix schedule: pareto_shape must be > 0");
  }
}

std::vector<std::size_t> draw_schedule(const PrefixSchedule& schedule, Rng& rng) {
  schedule.validate();
  if (schedule.kind == PrefixKind::kFixed) return schedule.sizes;
  const double m = static_cast<double>(schedule.dict_size);
  std::vector<std::size_t> out;
  out.reserve(schedule.samples_per_batch);
  for (std::size_t i = 0; i + 1 < schedule.samples_per_batch; ++i) {
    // Pareto(x_min = 1, shape) by inversion; U in (0, 1].
    const double x = std::pow(rng.uniform_open_closed(), -1.0 / schedule.pareto_shape);
    const double clamped = std::clamp(x, 1.0, m);
    out.push_back(static_cast<std::size_t>(std::ceil(clamped)));
  }
  out.push_back(schedule.dict_size);
  std::sort(out.begin(), out.end());
  return out;
}

void validate_prefixes(std::span<const std::size_t> prefixes, std::size_t dict_size) {
  if (prefixes.empty()) throw RangeError("prefixes: empty list");
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    if (prefixes[i] < 1 || prefixes[i] > dict_size) {
      throw RangeError("prefixes: " + std::to_string(prefixes[i]) + " outside [1, " +
                       std::to_string(dict_size) + "]");
    }
    if (i > 0 && prefixes[i] < prefixes[i - 1]) throw RangeError("prefixes: not ascending");
  }
  if (prefixes.back() != dict_size) throw RangeError("prefixes: last prefix must be the full dictionary");
}

std::string to_string(LossWeighting w) {
  return w == LossWeighting::kEqual ? "equal" : "proportional";
}

LossWeighting loss_weighting_from_string(const std::string& name) {
  if (name == "equal") return LossWeighting::kEqual;
  if (name == "proportional") return LossWeighting::kProportional;
  throw ConfigError("unknown loss weighting '" + name + "' (expected equal or proportional)");
}

std::size_t LossCfg::effective_aux_k(std::size_t dict_size) const {
  if (aux_k != 0) return aux_k;
  return std::max<std::size_t>(1, std::min<std::size_t>(dict_size / 2, 512));
}

std::uint64_t LossCfg::effective_dead_after(std::size_t batch_size) const {
  if (dead_after_tokens != 0) return dead_after_tokens;
  return 200 * static_cast<std::uint64_t>(batch_size);
}

std::vector<double> materialize_weights(LossWeighting weighting,
                                        std::span<const std::size_t> prefixes) {
  if (prefixes.empty()) return {};
  std::vector<double> w(prefixes.size());
  if (weighting == LossWeighting::kEqual) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(prefixes.size()));
    return w;
  }
  const double total = static_cast<double>(prefixes.back());
  std::size_t prev = 0;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    w[i] = static_cast<double>(prefixes[i] - prev) / total;
    prev = prefixes[i];
  }
  return w;
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"per_prefix_mse", b.per_prefix_mse},
          {"weights", b.weights},
          {"l1", b.l1_term},
          {"aux", b.aux_term},
          {"l1_coeff", b.l1_coeff},
          {"aux_coeff", b.aux_coeff},
          {"total", b.total}};
}

std::array<Matrix*, 4> param_blocks(SaeParams& p) { return {&p.w_enc, &p.b_enc, &p.w_dec, &p.b_dec}; }

std::array<const Matrix*, 4> param_blocks(const SaeParams& p) {
  return {&p.w_enc, &p.b_enc, &p.w_dec, &p.b_dec};
}

const char* block_name(ParamBlock b) {
  switch (b) {
    case kWEnc:
      return "W_enc";
    case kBEnc:
      return "b_enc";
    case kWDec:
      return "W_dec";
    case kBDec:
      return "b_dec";
  }
  return "?";
}

namespace {

double mean_sq_error(const Matrix& recon, const Matrix& x) {
  double s = 0.0;
  const auto r = recon.values();
  const auto t = x.values();
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = r[i] - t[i];
    s += d * d;
  }
  return s / static_cast<double>(r.size());
}

// acts[:, begin:end] * w_dec[begin:end, :] added into `out`.
void add_group_contribution(Matrix& out, const Matrix& acts, const Matrix& w_dec, std::size_t begin,
                            std::size_t end) {
  const std::size_t n = w_dec.cols();
  Matrix contrib(acts.rows(), n);
  for (std::size_t b = 0; b < acts.rows(); ++b) {
    auto crow = contrib.row(b);
    auto frow = acts.row(b);
    for (std::size_t j = begin; j < end; ++j) {
      const double f = frow[j];
      if (f == 0.0) continue;
      auto drow = w_dec.row(j);
      for (std::size_t c = 0; c < n; ++c) crow[c] += f * drow[c];
    }
  }
  out += contrib;
}

Matrix broadcast_rows(const Matrix& row, std::size_t count) {
  Matrix out(count, row.cols());
  add_row_broadcast(out, row);
  return out;
}

// Sum of weights of the prefixes that include latent j.
std::vector<double> prefix_coverage(std::span<const std::size_t> prefixes,
                                    std::span<const double> weights, std::size_t m) {
  std::vector<double> cover(m, 0.0);
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    for (std::size_t j = 0; j < prefixes[i]; ++j) cover[j] += weights[i];
  }
  return cover;
}

bool any_dead(std::span<const std::uint8_t> mask) {
  return std::any_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; });
}

bool aux_active(const LossCfg& lcfg, const LossOptions& opts) {
  return lcfg.aux_coeff > 0.0 && any_dead(opts.dead_mask);
}

}  // namespace

AuxResult aux_loss(const SaeParams& params, const Matrix& pre, const Matrix& residual,
                   std::span<const std::uint8_t> dead_mask, std::size_t aux_k) {
  const std::size_t m = params.dict_size();
  AuxResult out;
  out.codes = Matrix(pre.rows(), m);
  out.recon = Matrix(pre.rows(), params.input_dim());
  if (dead_mask.size() != m || !any_dead(dead_mask) || aux_k == 0) return out;

  std::vector<std::size_t> dead;
  for (std::size_t j = 0; j < m; ++j) {
    if (dead_mask[j]) dead.push_back(j);
  }
  const std::size_t keep = std::min(aux_k, dead.size());
  std::vector<std::size_t> order(dead.size());
  for (std::size_t b = 0; b < pre.rows(); ++b) {
    auto z = pre.row(b);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [&](std::size_t a, std::size_t c) {
                        const double za = z[dead[a]], zc = z[dead[c]];
                        return za > zc || (za == zc && dead[a] < dead[c]);
                      });
    for (std::size_t i = 0; i < keep; ++i) {
      const std::size_t j = dead[order[i]];
      if (z[j] > 0.0) out.codes(b, j) = z[j];
    }
  }
  out.recon = matmul(out.codes, params.w_dec);
  out.value = mean_sq_error(out.recon, residual);
  return out;
}

ForwardPass forward_loss(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                         std::span<const std::size_t> prefixes, const Matrix& x,
                         const LossOptions& opts) {
  params.validate();
  const std::size_t m = params.dict_size();
  validate_prefixes(prefixes, m);
  if (!opts.dead_mask.empty() && opts.dead_mask.size() != m) {
    throw ShapeError("forward_loss: dead mask length differs from dictionary size");
  }

  ForwardPass fwd;
  auto& bd = fwd.breakdown;
  bd.weights = opts.weights.empty() ? materialize_weights(lcfg.weighting, prefixes) : opts.weights;
  if (bd.weights.size() != prefixes.size()) {
    throw ShapeError("forward_loss: one weight per prefix required");
  }
  bd.l1_coeff = lcfg.l1_coeff;
  bd.aux_coeff = lcfg.aux_coeff;

  fwd.encoding = encode_full(params, act, x, EncodeMode::kTrain);
  const Matrix& f = fwd.encoding.acts;

  const Detached* det = opts.detached;
  if (det && lcfg.stop_gradient && det->partials.size() != prefixes.size()) {
    throw ShapeError("forward_loss: detached partials do not match the prefix count");
  }

  Matrix running = broadcast_rows(params.b_dec, x.rows());
  fwd.partials.reserve(prefixes.size());
  std::size_t start = 0;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    if (lcfg.stop_gradient && i > 0 && det) running = det->partials[i - 1];
    add_group_contribution(running, f, params.w_dec, start, prefixes[i]);
    fwd.partials.push_back(running);
    bd.per_prefix_mse.push_back(mean_sq_error(running, x));
    start = prefixes[i];
  }

  if (lcfg.l1_coeff != 0.0) {
    const auto cover = prefix_coverage(prefixes, bd.weights, m);
    const Matrix col = column_sums(f);
    double l1 = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      l1 += cover[j] * col(0, j) * l2_norm(params.w_dec.row(j));
    }
    bd.l1_term = l1 / static_cast<double>(x.rows());
  }

  if (aux_active(lcfg, opts)) {
    fwd.residual = det ? det->residual : x - fwd.partials.back();
    auto aux = aux_loss(params, fwd.encoding.pre, fwd.residual, opts.dead_mask,
                        lcfg.effective_aux_k(m));
    bd.aux_term = aux.value;
    fwd.aux_codes = std::move(aux.codes);
    fwd.aux_recon = std::move(aux.recon);
  }

  double total = 0.0;
  for (std::size_t i = 0; i < prefixes.size(); ++i) total += bd.weights[i] * bd.per_prefix_mse[i];
  if (lcfg.l1_coeff != 0.0) total += lcfg.l1_coeff * bd.l1_term;
  if (aux_active(lcfg, opts)) total += lcfg.aux_coeff * bd.aux_term;
  bd.total = total;
  return fwd;
}

SaeGrads backward(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                  std::span<const std::size_t> prefixes, const Matrix& x, const ForwardPass& fwd,
                  const LossOptions& opts) {
  (void)act;
  const std::size_t m = params.dict_size();
  const std::size_t n = params.input_dim();
  const std::size_t batch = x.rows();
  const std::size_t groups = prefixes.size();
  const auto& weights = fwd.breakdown.weights;
  const Matrix& f = fwd.encoding.acts;
  const double inv_count = 2.0 / static_cast<double>(batch * n);

  // Direct gradient of each stage's MSE with respect to its reconstruction.
  std::vector<Matrix> stage(groups);
  for (std::size_t i = 0; i < groups; ++i) {
    stage[i] = fwd.partials[i] - x;
    stage[i] *= weights[i] * inv_count;
  }
  // Gradient reaching group i's contribution: every later stage without
  // stop-gradient, only its own stage with it.
  if (!lcfg.stop_gradient) {
    for (std::size_t i = groups - 1; i-- > 0;) stage[i] += stage[i + 1];
  }

  SaeGrads g;
  g[kWDec] = Matrix(m, n);
  Matrix d_acts(batch, m);
  std::size_t start = 0;
  for (std::size_t i = 0; i < groups; ++i) {
    const std::size_t end = prefixes[i];
    if (end > start) {
      const Matrix& h = stage[i];
      for (std::size_t b = 0; b < batch; ++b) {
        auto hrow = h.row(b);
        auto frow = f.row(b);
        auto drow_acts = d_acts.row(b);
        for (std::size_t j = start; j < end; ++j) {
          // Inactive latents are masked below, so their code gradient is unused.
          const double fj = frow[j];
          if (fj == 0.0) continue;
          drow_acts[j] = dot(hrow, params.w_dec.row(j));
          auto grow = g[kWDec].row(j);
          for (std::size_t c = 0; c < n; ++c) grow[c] += fj * hrow[c];
        }
      }
    }
    start = end;
  }
  g[kBDec] = column_sums(stage[0]);

  if (lcfg.l1_coeff != 0.0) {
    const auto cover = prefix_coverage(prefixes, weights, m);
    const Matrix col = column_sums(f);
    const double scale = lcfg.l1_coeff / static_cast<double>(batch);
    for (std::size_t j = 0; j < m; ++j) {
      auto wrow = params.w_dec.row(j);
      const double norm = l2_norm(wrow);
      const double per_act = scale * cover[j] * norm;
      for (std::size_t b = 0; b < batch; ++b) d_acts(b, j) += per_act;
      if (norm > 0.0) {
        const double coef = scale * cover[j] * col(0, j) / norm;
        auto grow = g[kWDec].row(j);
        for (std::size_t c = 0; c < n; ++c) grow[c] += coef * wrow[c];
      }
    }
  }

  // ReLU gates and TopK supports are frozen: gradient passes where f > 0.
  Matrix d_pre(batch, m);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f.values()[i] > 0.0) d_pre.values()[i] = d_acts.values()[i];
  }

  if (aux_active(lcfg, opts)) {
    Matrix diff = fwd.aux_recon - fwd.residual;
    diff *= lcfg.aux_coeff * inv_count;
    g[kWDec] += matmul_tn(fwd.aux_codes, diff);
    const Matrix d_aux = matmul_nt(diff, params.w_dec);
    for (std::size_t i = 0; i < d_pre.size(); ++i) {
      if (fwd.aux_codes.values()[i] > 0.0) d_pre.values()[i] += d_aux.values()[i];
    }
  }

  Matrix centered = x;
  if (params.pre_encoder_bias) {
    auto bdec = params.b_dec.row(0);
    for (std::size_t b = 0; b < batch; ++b) {
      auto row = centered.row(b);
      for (std::size_t c = 0; c < n; ++c) row[c] -= bdec[c];
    }
  }
  g[kWEnc] = matmul_tn(d_pre, centered);
  g[kBEnc] = column_sums(d_pre);
  if (params.pre_encoder_bias) g[kBDec] -= matmul(g[kBEnc], params.w_enc);
  return g;
}

SaeGrads backward(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                  std::span<const std::size_t> prefixes, const Matrix& x, const LossOptions& opts) {
  const ForwardPass fwd = forward_loss(params, act, lcfg, prefixes, x, opts);
  return backward(params, act, lcfg, prefixes, x, fwd, opts);
}

Detached detach_at(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                   std::span<const std::size_t> prefixes, const Matrix& x, const LossOptions& opts) {
  LossOptions plain = opts;
  plain.detached = nullptr;
  ForwardPass fwd = forward_loss(params, act, lcfg, prefixes, x, plain);
  Detached d;
  d.partials = std::move(fwd.partials);
  d.residual = x - d.partials.back();
  return d;
}

}  // namespace msae
