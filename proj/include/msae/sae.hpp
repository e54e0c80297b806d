#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msae/matrix.hpp"
#include "msae/rng.hpp"

namespace msae {

enum class ActivationKind { kRelu, kTopK, kBatchTopK };

std::string to_string(ActivationKind kind);
ActivationKind activation_kind_from_string(const std::string& name);

struct ActivationCfg {
  ActivationKind kind = ActivationKind::kRelu;
  // Per-sample k for topk; average per-sample K for batch_topk.
  std::size_t k = 1;
  // Global inference threshold for batch_topk, set by calibrate_threshold.
  std::optional<double> threshold;

  void validate() const;
};

enum class EncodeMode { kTrain, kInference };

// Encoder and decoder are both stored latent-major (m x n) so that latent i
// owns row i of each and a prefix of latents is a contiguous row block.
struct SaeParams {
  Matrix w_enc;  // m x n
  Matrix b_enc;  // 1 x m
  Matrix w_dec;  // m x n
  Matrix b_dec;  // 1 x n
  // Subtract b_dec from the input before encoding.
  bool pre_encoder_bias = true;

  std::size_t dict_size() const { return w_dec.rows(); }
  std::size_t input_dim() const { return w_dec.cols(); }

  void validate() const;
  bool all_finite() const;

  friend bool operator==(const SaeParams&, const SaeParams&) = default;
};

// Unit-norm Gaussian decoder rows, encoder initialized to the same rows,
// zero biases.
SaeParams init_params(std::size_t m, std::size_t n, Rng& rng);

struct Encoding {
  Matrix pre;   // B x m pre-activations
  Matrix acts;  // B x m sparse codes; a latent is on iff acts > 0
};

// Pre-activations (x - b_dec) W_enc^T + b_enc (the subtraction only when
// pre_encoder_bias is set).
Matrix pre_activations(const SaeParams& params, const Matrix& x);

Encoding encode_full(const SaeParams& params, const ActivationCfg& cfg, const Matrix& x,
                     EncodeMode mode);
Matrix encode(const SaeParams& params, const ActivationCfg& cfg, const Matrix& x, EncodeMode mode);

// Applies the activation rule to a matrix of pre-activations.
Matrix activate(const Matrix& pre, const ActivationCfg& cfg, EncodeMode mode);

// Selection primitives, all operating on post-ReLU values.
// Per row keeps the k largest positive entries; ties go to the lower column.
Matrix topk_rows(const Matrix& relu_pre, std::size_t k);
// Keeps the keep_count largest positive entries of the whole matrix ranked by
// (value desc, row-major index asc).
Matrix batch_topk(const Matrix& relu_pre, std::size_t keep_count);
// Value of the keep_count-th largest entry (1-based), the per-batch threshold.
double batch_kth_value(const Matrix& relu_pre, std::size_t keep_count);
Matrix relu(const Matrix& m);

// F[:, 0:prefix] W_dec[0:prefix, :] + b_dec
Matrix decode_prefix(const SaeParams& params, const Matrix& acts, std::size_t prefix);
Matrix decode(const SaeParams& params, const Matrix& acts);

using BatchSource = std::function<std::optional<Matrix>()>;

// Mean over calibration batches of the (B*K)-th largest post-ReLU
// pre-activation. Pulls at most num_batches batches from `source`.
double calibrate_threshold(const SaeParams& params, const ActivationCfg& cfg,
                           const BatchSource& source, std::size_t num_batches);
double calibrate_threshold(const SaeParams& params, const ActivationCfg& cfg,
                           const std::vector<Matrix>& batches);

// Mean number of nonzero entries per row.
double mean_l0(const Matrix& acts);
std::size_t count_nonzero(const Matrix& acts);

}  // namespace msae
