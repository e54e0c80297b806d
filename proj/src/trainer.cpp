#include "msae/trainer.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <string>

#include "msae/error.hpp"

namespace msae {

void TrainConfig::validate() const {
  if (steps > 0 && batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (dict_size < 1) throw ConfigError("train: dict_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be > 0");
  if (log_every < 1) throw ConfigError("train: log_every must be >= 1");
  schedule.validate();
  if (schedule.dict_size != dict_size) {
    throw ConfigError("train: schedule dictionary size " + std::to_string(schedule.dict_size) +
                      " differs from dict_size " + std::to_string(dict_size));
  }
  if (loss.stop_gradient && schedule.kind != PrefixKind::kFixed) {
    throw ConfigError("train: stop_gradient is only supported with fixed prefix schedules");
  }
  if (loss.l1_coeff < 0.0 || loss.aux_coeff < 0.0) {
    throw ConfigError("train: loss coefficients must be >= 0");
  }
  activation.validate();
  if (activation.kind != ActivationKind::kRelu && activation.k > dict_size) {
    throw ConfigError("train: activation k exceeds dict_size");
  }
  if (controller_active()) {
    if (!(sparsity.eta > 0.0) || !(sparsity.lambda_min > 0.0) ||
        !(sparsity.lambda_max >= sparsity.lambda_min)) {
      throw ConfigError("train: invalid sparsity controller settings");
    }
  }
}

bool TrainConfig::controller_active() const {
  return sparsity.enabled && activation.kind == ActivationKind::kRelu;
}

TrainConfig toy_matryoshka_config() {
  TrainConfig c;
  c.dict_size = 20;
  c.schedule = PrefixSchedule::random(20, 10, 0.5);
  return c;
}

TrainConfig toy_vanilla_config() {
  TrainConfig c = toy_matryoshka_config();
  c.schedule = PrefixSchedule::vanilla(20);
  return c;
}

TrainConfig gemma_shape_65k_config() {
  TrainConfig c;
  c.dict_size = 65536;
  c.batch_size = 2048;
  c.lr = 3e-4;
  c.beta1 = 0.9;
  c.beta2 = 0.999;
  c.steps = 1;
  c.schedule = PrefixSchedule::fixed({2048, 6144, 14336, 30720, 65536});
  c.activation.kind = ActivationKind::kBatchTopK;
  c.activation.k = 40;
  c.sparsity.enabled = false;
  return c;
}

nlohmann::json to_json(const PrefixSchedule& s) {
  return {{"kind", s.kind == PrefixKind::kFixed ? "fixed" : "random"},
          {"sizes", s.kind == PrefixKind::kFixed ? s.sizes : std::vector<std::size_t>{}},
          {"pareto_shape", s.pareto_shape},
          {"samples_per_batch", s.samples_per_batch}};
}

PrefixSchedule schedule_from_json(const nlohmann::json& j, std::size_t dict_size) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "fixed") {
    auto sizes = j.at("sizes").get<std::vector<std::size_t>>();
    if (sizes.empty()) throw ConfigError("fixed schedule needs at least one size");
    return PrefixSchedule::fixed(std::move(sizes));
  }
  if (kind == "random") {
    return PrefixSchedule::random(dict_size, j.value("samples_per_batch", std::size_t{10}),
                                  j.value("pareto_shape", 0.5));
  }
  throw ConfigError("unknown schedule kind '" + kind + "' (expected fixed or random)");
}

nlohmann::json to_json(const LossCfg& c) {
  return {{"weighting", to_string(c.weighting)},
          {"stop_gradient", c.stop_gradient},
          {"l1_coeff", c.l1_coeff},
          {"aux_coeff", c.aux_coeff},
          {"aux_k", c.aux_k},
          {"dead_after_tokens", c.dead_after_tokens}};
}

LossCfg loss_cfg_from_json(const nlohmann::json& j) {
  LossCfg c;
  c.weighting = loss_weighting_from_string(j.value("weighting", std::string("equal")));
  c.stop_gradient = j.value("stop_gradient", false);
  c.l1_coeff = j.value("l1_coeff", 0.0);
  c.aux_coeff = j.value("aux_coeff", 1.0 / 32.0);
  c.aux_k = j.value("aux_k", std::size_t{0});
  c.dead_after_tokens = j.value("dead_after_tokens", std::uint64_t{0});
  return c;
}

nlohmann::json to_json(const SparsityControl& c) {
  return {{"enabled", c.enabled},     {"target_l0", c.target_l0},   {"eta", c.eta},
          {"lambda0", c.lambda0},     {"lambda_min", c.lambda_min}, {"lambda_max", c.lambda_max}};
}

SparsityControl sparsity_from_json(const nlohmann::json& j) {
  SparsityControl c;
  c.enabled = j.value("enabled", c.enabled);
  c.target_l0 = j.value("target_l0", c.target_l0);
  c.eta = j.value("eta", c.eta);
  c.lambda0 = j.value("lambda0", c.lambda0);
  c.lambda_min = j.value("lambda_min", c.lambda_min);
  c.lambda_max = j.value("lambda_max", c.lambda_max);
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"dict_size", c.dict_size},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"pre_encoder_bias", c.pre_encoder_bias},
          {"schedule", to_json(c.schedule)},
          {"loss", to_json(c.loss)},
          {"activation", to_json(c.activation)},
          {"sparsity", to_json(c.sparsity)},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.steps = j.at("steps").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.dict_size = j.at("dict_size").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.eps = j.value("eps", c.eps);
    c.grad_clip = j.at("grad_clip").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.pre_encoder_bias = j.value("pre_encoder_bias", true);
    c.schedule = schedule_from_json(j.at("schedule"), c.dict_size);
    c.loss = loss_cfg_from_json(j.at("loss"));
    c.activation = activation_from_json(j.at("activation"));
    c.sparsity = sparsity_from_json(j.value("sparsity", nlohmann::json::object()));
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

std::vector<std::uint8_t> TrainState::dead_mask(std::uint64_t dead_after) const {
  std::vector<std::uint8_t> mask(last_active_token.size(), 0);
  for (std::size_t j = 0; j < mask.size(); ++j) {
    mask[j] = tokens_seen - last_active_token[j] >= dead_after ? 1 : 0;
  }
  return mask;
}

TrainState init_train_state(const TrainConfig& cfg, std::size_t input_dim) {
  cfg.validate();
  const Rng root(cfg.seed);
  Rng init_rng = root.fork(0);
  TrainState s;
  s.params = init_params(cfg.dict_size, input_dim, init_rng);
  s.params.pre_encoder_bias = cfg.pre_encoder_bias;
  const AdamHyper hyper{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  const auto blocks = param_blocks(s.params);
  for (std::size_t b = 0; b < 4; ++b) {
    s.adam[b] = AdamState(blocks[b]->rows(), blocks[b]->cols(), hyper);
  }
  s.lambda = cfg.controller_active() ? cfg.sparsity.lambda0 : cfg.loss.l1_coeff;
  s.last_active_token.assign(cfg.dict_size, 0);
  s.data_rng = root.fork(1);
  s.schedule_rng = root.fork(2);
  return s;
}

BatchSampler tree_sampler(const FeatureTree& tree) {
  return [tree](std::uint64_t, std::size_t batch, Rng& rng) {
    return sample_batch(tree, batch, rng).x;
  };
}

BatchSampler replay_sampler(Matrix data) {
  if (data.rows() == 0) throw ConfigError("replay dataset is empty");
  return [data = std::move(data)](std::uint64_t step, std::size_t batch, Rng&) {
    Matrix out(batch, data.cols());
    const std::uint64_t rows = data.rows();
    for (std::size_t i = 0; i < batch; ++i) {
      const auto src = data.row(static_cast<std::size_t>((step * batch + i) % rows));
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  };
}

BatchSampler gaussian_sampler(std::size_t dim) {
  return [dim](std::uint64_t, std::size_t batch, Rng& rng) {
    Matrix out(batch, dim);
    for (auto& v : out.values()) v = rng.normal();
    return out;
  };
}

namespace {

void check_finite(double v, std::uint64_t step, const char* term) {
  if (!std::isfinite(v)) {
    throw NumericError("non-finite " + std::string(term) + " at step " + std::to_string(step));
  }
}

}  // namespace

TrainResult train_loop(const BatchSampler& sampler, std::size_t input_dim, const TrainConfig& cfg,
                       double target_l0, std::optional<TrainState> resume, const TrainHooks& hooks) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  result.target_l0 = target_l0;
  result.state = resume ? std::move(*resume) : init_train_state(cfg, input_dim);
  TrainState& s = result.state;
  if (s.params.dict_size() != cfg.dict_size || s.params.input_dim() != input_dim) {
    throw ConfigError("train: resumed state shape does not match the configuration");
  }

  const std::uint64_t dead_after = cfg.loss.effective_dead_after(cfg.batch_size);
  LossCfg lcfg = cfg.loss;

  while (s.step < cfg.steps) {
    const std::uint64_t step = s.step;
    const Matrix x = sampler(step, cfg.batch_size, s.data_rng);
    const std::vector<std::size_t> prefixes = draw_schedule(cfg.schedule, s.schedule_rng);

    lcfg.l1_coeff = s.lambda;
    LossOptions opts;
    if (lcfg.aux_coeff > 0.0) opts.dead_mask = s.dead_mask(dead_after);

    const ForwardPass fwd = forward_loss(s.params, cfg.activation, lcfg, prefixes, x, opts);
    const LossBreakdown& bd = fwd.breakdown;
    for (std::size_t i = 0; i < bd.per_prefix_mse.size(); ++i) check_finite(bd.per_prefix_mse[i], step, "mse");
    check_finite(bd.l1_term, step, "l1");
    check_finite(bd.aux_term, step, "aux");
    check_finite(bd.total, step, "total loss");

    SaeGrads grads = backward(s.params, cfg.activation, lcfg, prefixes, x, fwd, opts);
    clip_grad_norm(grads.blocks, cfg.grad_clip);
    auto blocks = param_blocks(s.params);
    for (std::size_t b = 0; b < 4; ++b) {
      adam_step(*blocks[b], grads.blocks[b], s.adam[b]);
      if (!blocks[b]->all_finite()) {
        throw NumericError("non-finite " + std::string(block_name(static_cast<ParamBlock>(b))) +
                           " after step " + std::to_string(step));
      }
    }

    const Matrix& f = fwd.encoding.acts;
    const double l0 = mean_l0(f);
    s.tokens_seen += cfg.batch_size;
    for (std::size_t j = 0; j < f.cols(); ++j) {
      for (std::size_t b = 0; b < f.rows(); ++b) {
        if (f(b, j) > 0.0) {
          s.last_active_token[j] = s.tokens_seen;
          break;
        }
      }
    }
    if (cfg.controller_active()) {
      const double next = s.lambda * std::exp(cfg.sparsity.eta * (l0 - target_l0));
      s.lambda = std::clamp(next, cfg.sparsity.lambda_min, cfg.sparsity.lambda_max);
    }
    s.step += 1;

    if (s.step % cfg.log_every == 0 || s.step == cfg.steps) {
      std::size_t dead = 0;
      for (auto d : s.dead_mask(dead_after)) dead += d;
      nlohmann::json rec = {{"step", s.step},
                            {"total", bd.total},
                            {"per_prefix_mse", bd.per_prefix_mse},
                            {"prefixes", prefixes},
                            {"l1", bd.l1_term},
                            {"aux", bd.aux_term},
                            {"l0_mean", l0},
                            {"lambda", lcfg.l1_coeff},
                            {"dead_latents", dead}};
      if (hooks.log_stream) *hooks.log_stream << rec.dump() << '\n';
      result.log.push_back(std::move(rec));
    }
    if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(s);
    }
  }

  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

namespace {

double resolve_target(const FeatureTree& tree, const TrainConfig& cfg) {
  return cfg.sparsity.target_l0 > 0.0 ? cfg.sparsity.target_l0 : expected_l0(tree);
}

}  // namespace

TrainResult train(const FeatureTree& tree, const TrainConfig& cfg, std::optional<TrainState> resume,
                  const TrainHooks& hooks) {
  return train_loop(tree_sampler(tree), tree.dim(), cfg, resolve_target(tree, cfg), std::move(resume),
                    hooks);
}

TrainResult train_vanilla_baseline(const FeatureTree& tree, const TrainConfig& cfg,
                                   std::optional<TrainState> resume, const TrainHooks& hooks) {
  TrainConfig vanilla = cfg;
  vanilla.schedule = PrefixSchedule::vanilla(cfg.dict_size);
  return train(tree, vanilla, std::move(resume), hooks);
}

namespace {

nlohmann::json rng_to_json(const Rng& r) {
  return {{"seed", r.seed()}, {"state", r.state()}};
}

Rng rng_from_json(const nlohmann::json& j) {
  return Rng::from_state(j.at("seed").get<std::uint64_t>(), j.at("state").get<Rng::State>());
}

constexpr std::array<const char*, 4> kAdamSuffix = {"W_enc", "b_enc", "W_dec", "b_dec"};

}  // namespace

ModelCheckpoint to_checkpoint(const TrainState& state, const TrainConfig& cfg) {
  ModelCheckpoint ckpt;
  ckpt.params = state.params;
  ckpt.activation = cfg.activation;
  ckpt.step = state.step;
  nlohmann::json adam_t = nlohmann::json::array();
  nlohmann::json adam_h = nlohmann::json::array();
  for (const auto& a : state.adam) {
    adam_t.push_back(a.t);
    adam_h.push_back({a.hyper.lr, a.hyper.beta1, a.hyper.beta2, a.hyper.eps});
  }
  ckpt.meta["schedule"] = to_json(cfg.schedule);
  ckpt.meta["config"] = to_json(cfg);
  ckpt.meta["trainer"] = {{"lambda", state.lambda},
                          {"tokens_seen", state.tokens_seen},
                          {"last_active_token", state.last_active_token},
                          {"adam_t", adam_t},
                          {"adam_hyper", adam_h},
                          {"data_rng", rng_to_json(state.data_rng)},
                          {"schedule_rng", rng_to_json(state.schedule_rng)}};
  for (std::size_t b = 0; b < 4; ++b) {
    ckpt.extra_tensors.push_back({std::string("adam_m_") + kAdamSuffix[b], state.adam[b].m});
    ckpt.extra_tensors.push_back({std::string("adam_v_") + kAdamSuffix[b], state.adam[b].v});
  }
  return ckpt;
}

TrainState train_state_from_checkpoint(const ModelCheckpoint& ckpt) {
  if (!ckpt.meta.contains("trainer")) {
    throw IoError("checkpoint carries no trainer state (model-only checkpoint)");
  }
  try {
    const auto& tj = ckpt.meta.at("trainer");
    TrainState s;
    s.params = ckpt.params;
    s.step = ckpt.step;
    s.lambda = tj.at("lambda").get<double>();
    s.tokens_seen = tj.at("tokens_seen").get<std::uint64_t>();
    s.last_active_token = tj.at("last_active_token").get<std::vector<std::uint64_t>>();
    s.data_rng = rng_from_json(tj.at("data_rng"));
    s.schedule_rng = rng_from_json(tj.at("schedule_rng"));
    for (std::size_t b = 0; b < 4; ++b) {
      AdamState& a = s.adam[b];
      a.t = tj.at("adam_t").at(b).get<std::uint64_t>();
      const auto& h = tj.at("adam_hyper").at(b);
      a.hyper = {h.at(0).get<double>(), h.at(1).get<double>(), h.at(2).get<double>(),
                 h.at(3).get<double>()};
      bool found_m = false, found_v = false;
      for (const auto& t : ckpt.extra_tensors) {
        if (t.name == std::string("adam_m_") + kAdamSuffix[b]) {
          a.m = t.value;
          found_m = true;
        } else if (t.name == std::string("adam_v_") + kAdamSuffix[b]) {
          a.v = t.value;
          found_v = true;
        }
      }
      if (!found_m || !found_v) throw IoError("checkpoint is missing Adam moments");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("trainer state: ") + e.what());
  }
}

}  // namespace msae
