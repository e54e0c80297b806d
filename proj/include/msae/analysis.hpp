#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/loss.hpp"
#include "msae/matrix.hpp"
#include "msae/rng.hpp"
#include "msae/sae.hpp"
#include "msae/toy_data.hpp"

namespace msae {

// ||X - Xhat||^2 / ||X - colmean(X)||^2. Throws NumericError on zero variance.
double fvu(const Matrix& x, const Matrix& xhat);

struct MatchResult {
  std::vector<std::size_t> latent_for_feature;
  std::vector<double> cosine;
  std::vector<std::size_t> unmatched_latents;
  // features x latents cosine similarity between tree directions and W_dec rows.
  Matrix similarity;

  double min_cosine() const;
  std::size_t count_at_least(double threshold) const;
  // Mean |cos| of the features x matched-latents block, diagonal excluded.
  double mean_offdiag_abs() const;
};

// Hungarian assignment of features to latents minimizing 1 - cosine.
MatchResult match_latents(const SaeParams& params, const FeatureTree& tree);
nlohmann::json to_json(const MatchResult& m);

// Similarity heatmap: rows are features, columns are latents ordered by the
// assignment (matched latents first, then unmatched in index order).
void write_heatmap_csv(std::ostream& out, const MatchResult& m);

// Batch-TopK models without a calibrated threshold fall back to train mode.
EncodeMode eval_mode(const ActivationCfg& cfg);

struct AbsorptionOptions {
  double fire_eps = 1e-6;
  double min_match_cosine = 0.5;
};

struct EdgeAbsorption {
  std::size_t parent = 0;
  std::size_t child = 0;
  std::size_t parent_latent = 0;
  std::size_t child_latent = 0;
  std::size_t child_active = 0;
  double rate = 0.0;
};

struct AbsorptionResult {
  std::vector<EdgeAbsorption> edges;
  double aggregate = 0.0;
  // False when the matching gate failed; rates are then reported but flagged.
  bool reliable = true;
  double min_matched_cosine = 0.0;
  std::string note;
};

// Per parent-child edge: over samples where the child feature is active, the
// fraction where the child's latent fires and the parent's latent does not.
AbsorptionResult absorption_rate(const SaeParams& params, const ActivationCfg& cfg,
                                 const FeatureTree& tree, const std::vector<ToyBatch>& eval,
                                 const AbsorptionOptions& opts = {});
AbsorptionResult absorption_rate(const SaeParams& params, const ActivationCfg& cfg,
                                 const FeatureTree& tree, const MatchResult& match,
                                 const std::vector<ToyBatch>& eval,
                                 const AbsorptionOptions& opts = {});
nlohmann::json to_json(const AbsorptionResult& a);

// Mean over latents of the max cosine to any other decoder row. Needs m >= 2.
double avg_max_cosine(const SaeParams& params);

struct LatentFrequency {
  std::vector<double> per_latent;
  // Exclusive upper bounds of the latent groups, ascending, last == m.
  std::vector<std::size_t> group_bounds;
  std::vector<double> group_means;
  std::uint64_t tokens = 0;
};

// Groups follow the fixed sizes, or quartiles of m for random schedules.
std::vector<std::size_t> default_group_bounds(const PrefixSchedule& schedule, std::size_t m);

LatentFrequency latent_frequency(const SaeParams& params, const ActivationCfg& cfg,
                                 const std::vector<Matrix>& eval,
                                 std::vector<std::size_t> group_bounds = {},
                                 double fire_eps = 1e-6);
nlohmann::json to_json(const LatentFrequency& f);
void write_frequency_csv(std::ostream& out, const LatentFrequency& f);

struct MetaSaeOptions {
  std::size_t steps = 1000;
  double lr = 1e-3;
  std::size_t k = 4;
  std::size_t size_divisor = 4;
};

struct MetaProbeResult {
  std::optional<double> fvu;
  std::optional<double> variance_explained;
  bool degenerate = false;
  std::string note;
};

// Trains a BatchTopK SAE with m / 4 latents and K = 4 on the unit-normalized
// decoder rows (the full set is every batch) and reports its FVU on them.
MetaProbeResult meta_sae_probe(const SaeParams& params, Rng& rng, const MetaSaeOptions& opts = {});
nlohmann::json to_json(const MetaProbeResult& r);

struct RasterModel {
  std::string name;
  const SaeParams* params = nullptr;
  ActivationCfg cfg;
};

struct Raster {
  std::vector<std::string> header;
  Matrix values;
};

// Columns: ground-truth indicators for every feature, then for each model the
// activation of the latent matched to each feature.
Raster activation_raster(const FeatureTree& tree, const ToyBatch& batch,
                         const std::vector<RasterModel>& models);
void write_raster_csv(std::ostream& out, const Raster& r);

// W_dec = W_enc = tree directions with zero biases; exact on orthonormal trees.
SaeParams ground_truth_params(const FeatureTree& tree);

struct AnalysisOptions {
  std::size_t eval_samples = 10000;
  std::size_t eval_batch = 1000;
  AbsorptionOptions absorption;
  std::vector<std::size_t> group_bounds;
  bool run_meta = true;
  MetaSaeOptions meta;
  std::uint64_t seed = 0;
};

struct AnalysisReport {
  double fvu = 0.0;
  double l0_mean = 0.0;
  double avg_max_cos = 0.0;
  AbsorptionResult absorption;
  MatchResult match;
  LatentFrequency latent_freq;
  std::optional<MetaProbeResult> meta;
};

// Draws a fresh eval stream from the tree (Rng(seed).fork(10)) and runs every
// metric on it. The meta probe uses Rng(seed).fork(11).
AnalysisReport analyze(const SaeParams& params, const ActivationCfg& cfg, const FeatureTree& tree,
                       const AnalysisOptions& opts = {});
nlohmann::json to_json(const AnalysisReport& r);

std::vector<ToyBatch> eval_stream(const FeatureTree& tree, std::size_t samples,
                                  std::size_t batch, Rng& rng);

}  // namespace msae
