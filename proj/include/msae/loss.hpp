#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/matrix.hpp"
#include "msae/rng.hpp"
#include "msae/sae.hpp"

namespace msae {

enum class PrefixKind { kFixed, kRandom };

// Nested dictionary sizes. Fixed schedules return `sizes` on every batch;
// random schedules draw samples_per_batch - 1 truncated-Pareto prefixes and
// always append the full dictionary.
struct PrefixSchedule {
  PrefixKind kind = PrefixKind::kFixed;
  std::vector<std::size_t> sizes;
  double pareto_shape = 0.5;
  std::size_t samples_per_batch = 10;
  std::size_t dict_size = 0;

  static PrefixSchedule fixed(std::vector<std::size_t> sizes);
  static PrefixSchedule random(std::size_t dict_size, std::size_t samples_per_batch = 10,
                               double pareto_shape = 0.5);
  // The single prefix {m}: a plain SAE.
  static PrefixSchedule vanilla(std::size_t dict_size);

  void validate() const;
};

std::vector<std::size_t> draw_schedule(const PrefixSchedule& schedule, Rng& rng);

// Non-decreasing, within [1, m], ending at m. Duplicates are allowed and
// produce empty latent groups.
void validate_prefixes(std::span<const std::size_t> prefixes, std::size_t dict_size);

enum class LossWeighting { kEqual, kProportional };

std::string to_string(LossWeighting w);
LossWeighting loss_weighting_from_string(const std::string& name);

struct LossCfg {
  LossWeighting weighting = LossWeighting::kEqual;
  // Detach each partial reconstruction before the next group is added.
  bool stop_gradient = false;
  // L1 coefficient on decoder-norm-scaled activations.
  double l1_coeff = 0.0;
  double aux_coeff = 1.0 / 32.0;
  // 0 selects min(m / 2, 512).
  std::size_t aux_k = 0;
  // 0 selects 200 * batch_size.
  std::uint64_t dead_after_tokens = 0;

  std::size_t effective_aux_k(std::size_t dict_size) const;
  std::uint64_t effective_dead_after(std::size_t batch_size) const;
};

// equal: 1/G each. proportional: (p_i - p_{i-1}) / p_G with p_0 = 0.
std::vector<double> materialize_weights(LossWeighting weighting,
                                        std::span<const std::size_t> prefixes);

struct LossBreakdown {
  std::vector<double> per_prefix_mse;
  std::vector<double> weights;
  // Prefix-weighted L1: sum_i w_i * mean_b sum_{j < p_i} f_bj * |W_dec[j]|.
  double l1_term = 0.0;
  double aux_term = 0.0;
  double l1_coeff = 0.0;
  double aux_coeff = 0.0;
  // sum_i w_i * mse_i + l1_coeff * l1_term + aux_coeff * aux_term
  double total = 0.0;
};

nlohmann::json to_json(const LossBreakdown& b);

// Values of quantities that are detached from the graph. Freezing them at a
// base point turns the loss into a function whose plain derivative is the
// gradient backward() computes, which is what finite-difference checks need.
struct Detached {
  std::vector<Matrix> partials;
  Matrix residual;
};

struct LossOptions {
  // Overrides the configured weighting when non-empty (one per prefix).
  std::vector<double> weights;
  // Per-latent flag: latent is dead and eligible for the auxiliary loss.
  std::vector<std::uint8_t> dead_mask;
  const Detached* detached = nullptr;
};

struct ForwardPass {
  LossBreakdown breakdown;
  Encoding encoding;
  // Running reconstruction after each prefix; partials.back() is the full one.
  std::vector<Matrix> partials;
  // Present only when the auxiliary loss is active.
  Matrix residual;
  Matrix aux_codes;
  Matrix aux_recon;
};

enum ParamBlock : std::size_t { kWEnc = 0, kBEnc = 1, kWDec = 2, kBDec = 3 };

struct SaeGrads {
  std::array<Matrix, 4> blocks;

  Matrix& operator[](ParamBlock b) { return blocks[b]; }
  const Matrix& operator[](ParamBlock b) const { return blocks[b]; }
};

std::array<Matrix*, 4> param_blocks(SaeParams& p);
std::array<const Matrix*, 4> param_blocks(const SaeParams& p);
const char* block_name(ParamBlock b);

// Computes codes once, then the nested reconstructions incrementally: start
// from b_dec and add one latent group at a time, recording the MSE (mean over
// batch and input dimensions) after each prefix.
ForwardPass forward_loss(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                         std::span<const std::size_t> prefixes, const Matrix& x,
                         const LossOptions& opts = {});

// Analytic gradient of forward_loss. Activation masks (ReLU gates and TopK /
// BatchTopK supports) are treated as constants of the forward pass.
SaeGrads backward(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                  std::span<const std::size_t> prefixes, const Matrix& x, const ForwardPass& fwd,
                  const LossOptions& opts = {});

SaeGrads backward(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                  std::span<const std::size_t> prefixes, const Matrix& x,
                  const LossOptions& opts = {});

struct AuxResult {
  double value = 0.0;
  Matrix codes;  // B x m, nonzero only on selected dead latents
  Matrix recon;  // codes * W_dec, no bias
};

// Reconstructs `residual` from the aux_k largest positive pre-activations
// among dead latents (per row, ties to the lower index). Zero when no latent
// is dead.
AuxResult aux_loss(const SaeParams& params, const Matrix& pre, const Matrix& residual,
                   std::span<const std::uint8_t> dead_mask, std::size_t aux_k);

// Freezes the detached values of a forward pass at `params`.
Detached detach_at(const SaeParams& params, const ActivationCfg& act, const LossCfg& lcfg,
                   std::span<const std::size_t> prefixes, const Matrix& x,
                   const LossOptions& opts = {});

}  // namespace msae
