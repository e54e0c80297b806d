#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "msae/analysis.hpp"
#include "msae/error.hpp"
#include "msae/linalg.hpp"
#include "test_support.hpp"

using namespace msae;
using msae::testing::random_matrix;

namespace {

FeatureTree toy_tree(std::uint64_t seed = 0) {
  Rng rng(seed);
  return build_default_tree(rng);
}

ActivationCfg relu_cfg() { return ActivationCfg{}; }

double two_pass_fvu(const Matrix& x, const Matrix& xhat) {
  std::vector<double> mean(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) mean[c] += x(r, c);
  for (auto& v : mean) v /= static_cast<double>(x.rows());
  double num = 0.0, den = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      num += (x(r, c) - xhat(r, c)) * (x(r, c) - xhat(r, c));
      den += (x(r, c) - mean[c]) * (x(r, c) - mean[c]);
    }
  return num / den;
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy(m.row(perm[i]).begin(), m.row(perm[i]).end(), out.row(i).begin());
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[rng.below(i + 1)]);
  return p;
}

}  // namespace

TEST_CASE("fvu") {
  Rng rng(1);
  const Matrix x = random_matrix(30, 6, rng);
  CHECK(fvu(x, x) == 0.0);
  Matrix mean_rows(30, 6);
  add_row_broadcast(mean_rows, column_means(x));
  CHECK(fvu(x, mean_rows) == doctest::Approx(1.0).epsilon(1e-12));
  const Matrix xhat = x + random_matrix(30, 6, rng, 0.3);
  CHECK(std::abs(fvu(x, xhat) - two_pass_fvu(x, xhat)) < 1e-12);

  const auto perm = shuffled(30, rng);
  CHECK(std::abs(fvu(permute_rows(x, perm), permute_rows(xhat, perm)) - fvu(x, xhat)) < 1e-12);
  CHECK_THROWS_AS(fvu(Matrix(4, 2, 1.0), Matrix(4, 2)), NumericError);
  CHECK_THROWS_AS(fvu(x, Matrix(30, 5)), ShapeError);
}

TEST_CASE("match_latents recovers identity and permutations") {
  const auto tree = toy_tree(2);
  SaeParams p = ground_truth_params(tree);
  MatchResult m = match_latents(p, tree);
  for (std::size_t f = 0; f < 20; ++f) {
    CHECK(m.latent_for_feature[f] == f);
    CHECK(m.cosine[f] == doctest::Approx(1.0));
  }
  CHECK(m.unmatched_latents.empty());
  CHECK(m.count_at_least(0.9) == 20);
  CHECK(m.mean_offdiag_abs() < 1e-12);

  Rng rng(3);
  const auto perm = shuffled(20, rng);
  SaeParams q = p;
  q.w_dec = permute_rows(p.w_dec, perm);
  q.w_enc = permute_rows(p.w_enc, perm);
  m = match_latents(q, tree);
  for (std::size_t latent = 0; latent < 20; ++latent) CHECK(m.latent_for_feature[perm[latent]] == latent);
}

TEST_CASE("match_latents is stable under small noise") {
  const auto tree = toy_tree(4);
  SaeParams p = ground_truth_params(tree);
  Rng rng(5);
  const auto perm = shuffled(20, rng);
  p.w_dec = permute_rows(p.w_dec, perm) + random_matrix(20, 20, rng, 0.01);
  const MatchResult noisy = match_latents(p, tree);
  for (std::size_t latent = 0; latent < 20; ++latent) CHECK(noisy.latent_for_feature[perm[latent]] == latent);
  CHECK(noisy.min_cosine() > 0.99);
}

TEST_CASE("match_latents with a larger dictionary and shape errors") {
  const auto tree = toy_tree(6);
  Rng rng(7);
  SaeParams p = init_params(24, 20, rng);
  for (std::size_t f = 0; f < 20; ++f)
    std::copy(tree.directions().row(f).begin(), tree.directions().row(f).end(), p.w_dec.row(f + 4).begin());
  const MatchResult m = match_latents(p, tree);
  CHECK(m.unmatched_latents.size() == 4);
  CHECK(m.latent_for_feature[0] == 4);
  for (std::size_t f = 0; f < 20; ++f) CHECK(std::abs(m.cosine[f]) <= 1.0 + 1e-12);
  std::stringstream csv;
  write_heatmap_csv(csv, m);
  std::string header;
  std::getline(csv, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 24);
  CHECK_THROWS_AS(match_latents(init_params(10, 20, rng), tree), ShapeError);
  CHECK_THROWS_AS(match_latents(init_params(30, 8, rng), tree), ShapeError);
}

TEST_CASE("absorption: exact solution and surgery") {
  const auto tree = toy_tree(8);
  Rng rng(9);
  const auto eval = eval_stream(tree, 20000, 1000, rng);
  const SaeParams gt = ground_truth_params(tree);
  const AbsorptionResult clean = absorption_rate(gt, relu_cfg(), tree, eval);
  CHECK(clean.reliable);
  CHECK(clean.edges.size() == 16);
  CHECK(clean.aggregate == 0.0);
  for (const auto& e : clean.edges) CHECK(e.rate == 0.0);

  // Parent 0's encoder is made to switch off whenever child 1 is present.
  SaeParams absorbed = gt;
  for (std::size_t c = 0; c < 20; ++c) {
    absorbed.w_enc(0, c) = tree.directions()(0, c) - 2.0 * tree.directions()(1, c);
  }
  const AbsorptionResult bad = absorption_rate(absorbed, relu_cfg(), tree, eval);
  for (const auto& e : bad.edges) {
    if (e.parent == 0 && e.child == 1) {
      CHECK(e.rate == 1.0);
      CHECK(e.child_active > 0);
    } else if (e.parent == 0) {
      // Siblings are absorbed only when child 1 co-occurs.
      CHECK(e.rate > 0.0);
      CHECK(e.rate < 0.2);
    } else {
      CHECK(e.rate == 0.0);
    }
  }
  CHECK(bad.aggregate > 1.0 / 16.0);
  CHECK(bad.aggregate < 1.6 / 16.0);

  // Direct enumeration for that edge.
  std::size_t child_on = 0, absorbed_count = 0;
  for (const auto& b : eval) {
    const Matrix f = encode(absorbed, relu_cfg(), b.x, EncodeMode::kTrain);
    for (std::size_t s = 0; s < b.x.rows(); ++s) {
      if (!b.is_active(s, 1)) continue;
      ++child_on;
      absorbed_count += f(s, 1) > 1e-6 && f(s, 0) <= 1e-6;
    }
  }
  CHECK(absorbed_count == child_on);

  SaeParams scrambled = gt;
  scrambled.w_dec = random_matrix(20, 20, rng);
  const AbsorptionResult flagged = absorption_rate(scrambled, relu_cfg(), tree, eval);
  CHECK_FALSE(flagged.reliable);
  CHECK_FALSE(flagged.note.empty());
  CHECK(to_json(flagged).at("reliable") == false);
}

TEST_CASE("avg_max_cosine") {
  Rng rng(10);
  SaeParams p = init_params(20, 20, rng);
  orthonormalize_rows(p.w_dec);
  CHECK(std::abs(avg_max_cosine(p)) < 1e-12);

  p.w_dec = random_matrix(20, 20, rng);
  double brute = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    double best = -INFINITY;
    for (std::size_t j = 0; j < 20; ++j)
      if (j != i) best = std::max(best, cosine(p.w_dec.row(i), p.w_dec.row(j)));
    brute += best / 20.0;
  }
  CHECK(std::abs(avg_max_cosine(p) - brute) < 1e-12);

  std::copy(p.w_dec.row(0).begin(), p.w_dec.row(0).end(), p.w_dec.row(1).begin());
  CHECK(avg_max_cosine(p) >= 2.0 / 20.0 - 1.0);
  CHECK(avg_max_cosine(p) > brute);
  CHECK_THROWS_AS(avg_max_cosine(init_params(1, 3, rng)), RangeError);
}

TEST_CASE("latent frequency") {
  const auto tree = toy_tree(11);
  Rng rng(12);
  std::vector<Matrix> eval;
  const std::size_t n = 100000;
  for (const auto& b : eval_stream(tree, n, 5000, rng)) eval.push_back(b.x);

  SaeParams zero = ground_truth_params(tree);
  zero.w_enc = Matrix(20, 20);
  const LatentFrequency none = latent_frequency(zero, relu_cfg(), eval);
  for (double r : none.per_latent) CHECK(r == 0.0);

  const LatentFrequency lf = latent_frequency(ground_truth_params(tree), relu_cfg(), eval, {5, 20});
  CHECK(lf.tokens == n);
  for (std::size_t f = 0; f < 20; ++f) {
    const double p = tree.marginal(f);
    CHECK(std::abs(lf.per_latent[f] - p) <= 3.0 * std::sqrt(p * (1 - p) / n) + 1e-12);
  }
  REQUIRE(lf.group_means.size() == 2);
  CHECK(lf.group_means[0] ==
        doctest::Approx(std::accumulate(lf.per_latent.begin(), lf.per_latent.begin() + 5, 0.0) / 5));
  CHECK_THROWS_AS(latent_frequency(zero, relu_cfg(), eval, {5, 19}), Error);

  CHECK(default_group_bounds(PrefixSchedule::fixed({2, 6, 20}), 20) == std::vector<std::size_t>{2, 6, 20});
  CHECK(default_group_bounds(PrefixSchedule::random(20), 20) == std::vector<std::size_t>{5, 10, 15, 20});

  std::stringstream csv;
  write_frequency_csv(csv, lf);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 21);
}

TEST_CASE("meta SAE probe") {
  SaeParams onehot;
  onehot.w_dec = Matrix::identity(16);
  onehot.w_enc = onehot.w_dec;
  onehot.b_enc = Matrix(1, 16);
  onehot.b_dec = Matrix(1, 16);
  Rng rng(13);
  MetaSaeOptions opts;
  opts.steps = 300;
  const MetaProbeResult r = meta_sae_probe(onehot, rng, opts);
  REQUIRE(r.fvu.has_value());
  CHECK(*r.fvu > 0.0);
  CHECK(*r.variance_explained == doctest::Approx(1.0 - *r.fvu));
  CHECK_FALSE(r.degenerate);

  SaeParams same = onehot;
  for (std::size_t i = 0; i < 16; ++i) {
    std::fill(same.w_dec.row(i).begin(), same.w_dec.row(i).end(), 0.0);
    same.w_dec(i, 0) = 1.0;
  }
  const MetaProbeResult d = meta_sae_probe(same, rng, opts);
  CHECK(d.degenerate);
  CHECK_FALSE(d.fvu.has_value());
  CHECK(to_json(d).at("degenerate") == true);

  SaeParams small = onehot;
  small.w_dec = Matrix::identity(4);
  CHECK_THROWS_AS(meta_sae_probe(small, rng, opts), RangeError);

  Rng a(14), b(14);
  CHECK(meta_sae_probe(onehot, a, opts).fvu == meta_sae_probe(onehot, b, opts).fvu);
}

TEST_CASE("activation raster") {
  const auto tree = toy_tree(15);
  const SaeParams gt = ground_truth_params(tree);
  Rng rng(16);
  const ToyBatch batch = sample_batch(tree, 200, rng);
  const Raster r = activation_raster(tree, batch, {{"gt", &gt, relu_cfg()}, {"copy", &gt, relu_cfg()}});
  REQUIRE(r.values.cols() == 60);
  CHECK(r.header.size() == 60);
  for (std::size_t s = 0; s < 200; ++s)
    for (std::size_t f = 0; f < 20; ++f) {
      CHECK(std::abs(r.values(s, 20 + f) - r.values(s, f)) < 1e-12);
      CHECK(std::abs(r.values(s, 40 + f) - r.values(s, f)) < 1e-12);
    }

  ToyBatch zero = batch;
  zero.x = Matrix(200, 20);
  std::fill(zero.active.begin(), zero.active.end(), 0);
  const Raster z = activation_raster(tree, zero, {{"gt", &gt, relu_cfg()}});
  CHECK(z.values == Matrix(200, 40));

  std::stringstream csv;
  write_raster_csv(csv, r);
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("gt") != std::string::npos);
}

TEST_CASE("analyze on the exact solution and determinism") {
  const auto tree = toy_tree(17);
  AnalysisOptions opts;
  opts.eval_samples = 4000;
  opts.meta.steps = 100;
  opts.seed = 3;
  const SaeParams gt = ground_truth_params(tree);
  const AnalysisReport r = analyze(gt, relu_cfg(), tree, opts);
  CHECK(r.fvu < 1e-28);
  CHECK(r.absorption.aggregate == 0.0);
  CHECK(std::abs(r.avg_max_cos) < 1e-12);
  CHECK(r.meta.has_value());
  const auto j = to_json(r);
  for (const char* key : {"fvu", "l0_mean", "avg_max_cos", "absorption_rate", "match", "latent_freq", "meta_sae_fvu"}) {
    CHECK(j.contains(key));
  }
  CHECK(to_json(analyze(gt, relu_cfg(), tree, opts)).dump() == j.dump());
  CHECK(eval_mode(ActivationCfg{ActivationKind::kBatchTopK, 2, std::nullopt}) == EncodeMode::kTrain);
  CHECK(eval_mode(ActivationCfg{ActivationKind::kBatchTopK, 2, 0.1}) == EncodeMode::kInference);
}
