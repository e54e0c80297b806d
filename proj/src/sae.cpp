#include "msae/sae.hpp"

#include <algorithm>
#include <numeric>

#include "msae/error.hpp"
#include "msae/linalg.hpp"

namespace msae {

std::string to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu:
      return "relu";
    case ActivationKind::kTopK:
      return "topk";
    case ActivationKind::kBatchTopK:
      return "batch_topk";
  }
  return "unknown";
}

ActivationKind activation_kind_from_string(const std::string& name) {
  if (name == "relu") return ActivationKind::kRelu;
  if (name == "topk") return ActivationKind::kTopK;
  if (name == "batch_topk") return ActivationKind::kBatchTopK;
  throw ConfigError("unknown activation kind '" + name + "' (expected relu, topk or batch_topk)");
}

void ActivationCfg::validate() const {
  if (kind != ActivationKind::kRelu && k < 1) throw ConfigError("activation: k must be >= 1");
  if (threshold && *threshold < 0.0) throw ConfigError("activation: threshold must be >= 0");
}

void SaeParams::validate() const {
  const std::size_t m = w_dec.rows();
  const std::size_t n = w_dec.cols();
  if (m == 0 || n == 0) throw ShapeError("SaeParams: empty dictionary");
  if (w_enc.rows() != m || w_enc.cols() != n || b_enc.rows() != 1 || b_enc.cols() != m ||
      b_dec.rows() != 1 || b_dec.cols() != n) {
    throw ShapeError("SaeParams: inconsistent block shapes");
  }
}

bool SaeParams::all_finite() const {
  return w_enc.all_finite() && b_enc.all_finite() && w_dec.all_finite() && b_dec.all_finite();
}

SaeParams init_params(std::size_t m, std::size_t n, Rng& rng) {
  if (m == 0 || n == 0) throw RangeError("init_params: m and n must be >= 1");
  SaeParams p;
  p.w_dec = gaussian_matrix(m, n, rng);
  normalize_rows(p.w_dec);
  p.w_enc = p.w_dec;
  p.b_enc = Matrix(1, m);
  p.b_dec = Matrix(1, n);
  return p;
}

Matrix pre_activations(const SaeParams& params, const Matrix& x) {
  if (x.cols() != params.input_dim()) {
    throw ShapeError("encode: input has " + std::to_string(x.cols()) + " columns, SAE expects " +
                     std::to_string(params.input_dim()));
  }
  Matrix z;
  if (params.pre_encoder_bias) {
    Matrix centered = x;
    auto b = params.b_dec.row(0);
    for (std::size_t r = 0; r < centered.rows(); ++r) {
      auto row = centered.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] -= b[c];
    }
    z = matmul_nt(centered, params.w_enc);
  } else {
    z = matmul_nt(x, params.w_enc);
  }
  add_row_broadcast(z, params.b_enc);
  return z;
}

Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Matrix topk_rows(const Matrix& relu_pre, std::size_t k) {
  Matrix out(relu_pre.rows(), relu_pre.cols());
  const std::size_t keep = std::min(k, relu_pre.cols());
  std::vector<std::size_t> idx(relu_pre.cols());
  for (std::size_t r = 0; r < relu_pre.rows(); ++r) {
    auto row = relu_pre.row(r);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + keep, idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    for (std::size_t i = 0; i < keep; ++i) {
      if (row[idx[i]] > 0.0) out(r, idx[i]) = row[idx[i]];
    }
  }
  return out;
}

namespace {

// Row-major indices of the keep_count largest entries, ordered by
// (value desc, index asc).
std::vector<std::size_t> top_indices(const Matrix& m, std::size_t keep_count) {
  const auto vals = m.values();
  std::vector<std::size_t> idx(vals.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t keep = std::min(keep_count, idx.size());
  auto cmp = [&](std::size_t a, std::size_t b) {
    return vals[a] > vals[b] || (vals[a] == vals[b] && a < b);
  };
  if (keep > 0 && keep < idx.size()) {
    std::nth_element(idx.begin(), idx.begin() + (keep - 1), idx.end(), cmp);
  }
  idx.resize(keep);
  return idx;
}

}  // namespace

Matrix batch_topk(const Matrix& relu_pre, std::size_t keep_count) {
  Matrix out(relu_pre.rows(), relu_pre.cols());
  for (std::size_t i : top_indices(relu_pre, keep_count)) {
    const double v = relu_pre.values()[i];
    if (v > 0.0) out.values()[i] = v;
  }
  return out;
}

double batch_kth_value(const Matrix& relu_pre, std::size_t keep_count) {
  if (keep_count == 0 || keep_count > relu_pre.size()) {
    throw RangeError("batch_kth_value: keep count outside [1, B*m]");
  }
  auto idx = top_indices(relu_pre, keep_count);
  double kth = relu_pre.values()[idx[0]];
  for (std::size_t i : idx) kth = std::min(kth, relu_pre.values()[i]);
  return kth;
}

Matrix activate(const Matrix& pre, const ActivationCfg& cfg, EncodeMode mode) {
  cfg.validate();
  Matrix r = relu(pre);
  switch (cfg.kind) {
    case ActivationKind::kRelu:
      return r;
    case ActivationKind::kTopK:
      return topk_rows(r, cfg.k);
    case ActivationKind::kBatchTopK:
      if (mode == EncodeMode::kTrain) {
        const std::size_t keep = pre.rows() * cfg.k;
        if (cfg.k > pre.cols()) throw ConfigError("batch_topk: K exceeds dictionary size");
        return batch_topk(r, keep);
      }
      if (!cfg.threshold) {
        throw ConfigError("batch_topk inference needs a calibrated threshold");
      }
      for (auto& v : r.values()) {
        if (v < *cfg.threshold) v = 0.0;
      }
      return r;
  }
  return r;
}

Encoding encode_full(const SaeParams& params, const ActivationCfg& cfg, const Matrix& x,
                     EncodeMode mode) {
  Encoding e;
  e.pre = pre_activations(params, x);
  e.acts = activate(e.pre, cfg, mode);
  return e;
}

Matrix encode(const SaeParams& params, const ActivationCfg& cfg, const Matrix& x, EncodeMode mode) {
  return encode_full(params, cfg, x, mode).acts;
}

Matrix decode_prefix(const SaeParams& params, const Matrix& acts, std::size_t prefix) {
  const std::size_t m = params.dict_size();
  if (prefix < 1 || prefix > m) {
    throw RangeError("decode_prefix: prefix " + std::to_string(prefix) + " outside [1, " +
                     std::to_string(m) + "]");
  }
  if (acts.cols() != m) throw ShapeError("decode_prefix: code width does not match dictionary");
  const std::size_t n = params.input_dim();
  Matrix out(acts.rows(), n);
  for (std::size_t b = 0; b < acts.rows(); ++b) {
    auto orow = out.row(b);
    auto frow = acts.row(b);
    for (std::size_t j = 0; j < prefix; ++j) {
      const double f = frow[j];
      if (f == 0.0) continue;
      auto drow = params.w_dec.row(j);
      for (std::size_t c = 0; c < n; ++c) orow[c] += f * drow[c];
    }
  }
  add_row_broadcast(out, params.b_dec);
  return out;
}

Matrix decode(const SaeParams& params, const Matrix& acts) {
  return decode_prefix(params, acts, params.dict_size());
}

double calibrate_threshold(const SaeParams& params, const ActivationCfg& cfg,
                           const BatchSource& source, std::size_t num_batches) {
  if (cfg.kind != ActivationKind::kBatchTopK) {
    throw ConfigError("calibrate_threshold: activation must be batch_topk");
  }
  if (num_batches == 0) throw RangeError("calibrate_threshold: need at least one batch");
  double total = 0.0;
  std::size_t seen = 0;
  for (; seen < num_batches; ++seen) {
    auto batch = source();
    if (!batch) break;
    Matrix r = relu(pre_activations(params, *batch));
    total += batch_kth_value(r, batch->rows() * cfg.k);
  }
  if (seen == 0) throw NumericError("calibrate_threshold: calibration stream is empty");
  return total / static_cast<double>(seen);
}

double calibrate_threshold(const SaeParams& params, const ActivationCfg& cfg,
                           const std::vector<Matrix>& batches) {
  std::size_t next = 0;
  BatchSource src = [&]() -> std::optional<Matrix> {
    if (next >= batches.size()) return std::nullopt;
    return batches[next++];
  };
  return calibrate_threshold(params, cfg, src, std::max<std::size_t>(batches.size(), 1));
}

double mean_l0(const Matrix& acts) {
  if (acts.rows() == 0) return 0.0;
  return static_cast<double>(count_nonzero(acts)) / static_cast<double>(acts.rows());
}

std::size_t count_nonzero(const Matrix& acts) {
  std::size_t n = 0;
  for (double v : acts.values()) n += v != 0.0 ? 1 : 0;
  return n;
}

}  // namespace msae
