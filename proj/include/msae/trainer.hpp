#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/loss.hpp"
#include "msae/optim.hpp"
#include "msae/rng.hpp"
#include "msae/sae.hpp"
#include "msae/tensor_io.hpp"
#include "msae/toy_data.hpp"

namespace msae {

// Multiplicative L1 controller for the ReLU path:
//   lambda <- clamp(lambda * exp(eta * (l0_batch - target)), min, max)
struct SparsityControl {
  bool enabled = true;
  // <= 0 means "use expected_l0 of the generating tree".
  double target_l0 = 0.0;
  double eta = 3e-4;
  double lambda0 = 1e-3;
  double lambda_min = 1e-6;
  double lambda_max = 1e2;
};

struct TrainConfig {
  std::size_t steps = 40000;
  std::size_t batch_size = 200;
  std::size_t dict_size = 20;
  double lr = 3e-2;
  double beta1 = 0.5;
  double beta2 = 0.9375;
  double eps = 1e-8;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  bool pre_encoder_bias = true;
  PrefixSchedule schedule = PrefixSchedule::random(20);
  LossCfg loss;
  ActivationCfg activation;
  SparsityControl sparsity;
  std::size_t log_every = 1000;
  // 0 disables periodic checkpoints.
  std::size_t checkpoint_every = 0;

  void validate() const;
  // The L1 controller only drives ReLU models.
  bool controller_active() const;
};

// Toy recipe: 20 latents, ReLU, 10 truncated-Pareto prefixes per batch.
TrainConfig toy_matryoshka_config();
// Same recipe with the single prefix {m}.
TrainConfig toy_vanilla_config();
// LLM-scale shape: 65536 latents over 2304 inputs, five fixed nested sizes,
// BatchTopK, lr 3e-4, batch 2048.
TrainConfig gemma_shape_65k_config();

nlohmann::json to_json(const PrefixSchedule& s);
// Random schedules take their dictionary size from the enclosing config.
PrefixSchedule schedule_from_json(const nlohmann::json& j, std::size_t dict_size);
nlohmann::json to_json(const LossCfg& c);
LossCfg loss_cfg_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SparsityControl& c);
SparsityControl sparsity_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainState {
  SaeParams params;
  std::array<AdamState, 4> adam;
  double lambda = 0.0;
  // Token count at the end of the last batch in which each latent fired.
  std::vector<std::uint64_t> last_active_token;
  std::uint64_t tokens_seen = 0;
  std::uint64_t step = 0;
  Rng data_rng;
  Rng schedule_rng;

  std::vector<std::uint8_t> dead_mask(std::uint64_t dead_after) const;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

TrainState init_train_state(const TrainConfig& cfg, std::size_t input_dim);

// Produces the batch for a given step. Randomness must come from `rng`.
using BatchSampler = std::function<Matrix(std::uint64_t step, std::size_t batch, Rng& rng)>;

BatchSampler tree_sampler(const FeatureTree& tree);
// Cycles through the rows of a fixed dataset in order.
BatchSampler replay_sampler(Matrix data);
BatchSampler gaussian_sampler(std::size_t dim);

struct TrainHooks {
  // JSON-lines sink for log records.
  std::ostream* log_stream = nullptr;
  std::function<void(const TrainState&)> on_checkpoint;
};

struct TrainResult {
  TrainState state;
  std::vector<nlohmann::json> log;
  double target_l0 = 0.0;
  double seconds = 0.0;
};

// Runs steps [state.step, cfg.steps) of: sample batch, draw prefixes, forward,
// backward, clip, Adam on each parameter block, controller and dead-latent
// bookkeeping. Throws NumericError naming the step and term on a non-finite
// loss or parameter.
TrainResult train_loop(const BatchSampler& sampler, std::size_t input_dim, const TrainConfig& cfg,
                       double target_l0, std::optional<TrainState> resume = std::nullopt,
                       const TrainHooks& hooks = {});

TrainResult train(const FeatureTree& tree, const TrainConfig& cfg,
                  std::optional<TrainState> resume = std::nullopt, const TrainHooks& hooks = {});

// train() with the schedule forced to {m}.
TrainResult train_vanilla_baseline(const FeatureTree& tree, const TrainConfig& cfg,
                                   std::optional<TrainState> resume = std::nullopt,
                                   const TrainHooks& hooks = {});

// Trainer checkpoint: model checkpoint plus optimizer, controller, counters and
// RNG state, enough to resume bit-for-bit.
ModelCheckpoint to_checkpoint(const TrainState& state, const TrainConfig& cfg);
TrainState train_state_from_checkpoint(const ModelCheckpoint& ckpt);

}  // namespace msae
