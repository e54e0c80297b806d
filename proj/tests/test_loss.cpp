#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "msae/error.hpp"
#include "msae/linalg.hpp"
#include "msae/loss.hpp"
#include "msae/sae.hpp"
#include "msae/toy_data.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace msae;
using namespace msae::testing;

namespace {

ActivationCfg act_of(ActivationKind kind, std::size_t k = 1) {
  ActivationCfg c;
  c.kind = kind;
  c.k = k;
  return c;
}

SaeParams random_params(std::size_t m, std::size_t n, Rng& rng) {
  SaeParams p = init_params(m, n, rng);
  p.w_enc = random_matrix(m, n, rng, 0.6);
  p.b_enc = random_matrix(1, m, rng, 0.2);
  p.b_dec = random_matrix(1, n, rng, 0.2);
  return p;
}

}  // namespace

TEST_CASE("draw_schedule fixed returns sizes verbatim") {
  const std::vector<std::size_t> sizes = {2048, 6144, 14336, 30720, 65536};
  Rng rng(1);
  CHECK(draw_schedule(PrefixSchedule::fixed(sizes), rng) == sizes);
  CHECK(draw_schedule(PrefixSchedule::vanilla(20), rng) == std::vector<std::size_t>{20});
}

TEST_CASE("draw_schedule random law") {
  const auto s = PrefixSchedule::random(20, 10, 0.5);
  Rng rng(2);
  std::vector<std::size_t> all;
  for (int t = 0; t < 10000; ++t) {
    const auto p = draw_schedule(s, rng);
    REQUIRE(p.size() == 10);
    REQUIRE(p.back() == 20);
    REQUIRE(std::is_sorted(p.begin(), p.end()));
    REQUIRE(p.front() >= 1);
    all.insert(all.end(), p.begin(), p.end() - 1);
  }
  std::nth_element(all.begin(), all.begin() + all.size() / 2, all.end());
  CHECK(all[all.size() / 2] <= 10);
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(PrefixSchedule::fixed({4, 4, 8}).validate(), ConfigError);
  CHECK_THROWS_AS(PrefixSchedule::fixed({}).validate(), ConfigError);
  CHECK_THROWS_AS(PrefixSchedule::random(20, 0).validate(), ConfigError);
  const std::vector<std::size_t> bad = {3, 2, 8};
  CHECK_THROWS_AS(validate_prefixes(bad, 8), Error);
  const std::vector<std::size_t> short_end = {2, 4};
  CHECK_THROWS_AS(validate_prefixes(short_end, 8), Error);
  const std::vector<std::size_t> dup = {2, 2, 8};
  CHECK_NOTHROW(validate_prefixes(dup, 8));
}

TEST_CASE("materialize_weights") {
  const std::vector<std::size_t> p = {5, 10, 20};
  const auto prop = materialize_weights(LossWeighting::kProportional, p);
  CHECK(prop[0] == doctest::Approx(0.25));
  CHECK(prop[1] == doctest::Approx(0.25));
  CHECK(prop[2] == doctest::Approx(0.5));
  for (double w : materialize_weights(LossWeighting::kEqual, p)) CHECK(w == doctest::Approx(1.0 / 3));
  const std::vector<std::size_t> one = {20};
  CHECK(materialize_weights(LossWeighting::kEqual, one) == std::vector<double>{1.0});
  CHECK(materialize_weights(LossWeighting::kProportional, one) == std::vector<double>{1.0});

  const std::vector<std::size_t> dup = {4, 4, 8};
  const auto dw = materialize_weights(LossWeighting::kProportional, dup);
  CHECK(dw[1] == 0.0);
  CHECK(dw[0] + dw[1] + dw[2] == doctest::Approx(1.0));
  CHECK(loss_weighting_from_string(to_string(LossWeighting::kProportional)) ==
        LossWeighting::kProportional);
  CHECK_THROWS_AS(loss_weighting_from_string("cubic"), ConfigError);
}

TEST_CASE("incremental reconstruction equals decode_prefix") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = 4 + rng.below(9), n = 3 + rng.below(8);
    const SaeParams p = random_params(m, n, rng);
    const Matrix x = random_matrix(6, n, rng);
    const auto prefixes = draw_schedule(PrefixSchedule::random(m, 5), rng);
    LossCfg lcfg;
    lcfg.l1_coeff = 0.3;
    const auto fwd = forward_loss(p, act_of(ActivationKind::kRelu), lcfg, prefixes, x);
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      const Matrix direct = decode_prefix(p, fwd.encoding.acts, prefixes[i]);
      CHECK(msae::testing::max_rel_err(fwd.partials[i], direct, 1e-12) < 1e-10);
      CHECK(msae::testing::rel_err(fwd.breakdown.per_prefix_mse[i], mse_oracle(direct, x)) < 1e-10);
    }
    const auto& bd = fwd.breakdown;
    double total = bd.l1_coeff * bd.l1_term;
    for (std::size_t i = 0; i < prefixes.size(); ++i) total += bd.weights[i] * bd.per_prefix_mse[i];
    CHECK(msae::testing::rel_err(bd.total, total) < 1e-10);
  }
}

TEST_CASE("vanilla reduction is bitwise") {
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    const SaeParams p = random_params(10, 7, rng);
    const Matrix x = random_matrix(8, 7, rng);
    const std::vector<std::size_t> prefixes = {10};
    LossCfg lcfg;
    lcfg.aux_coeff = 0.0;
    const auto plain = plain_sae(p, x);
    const auto fwd = forward_loss(p, act_of(ActivationKind::kRelu), lcfg, prefixes, x);
    CHECK(fwd.breakdown.total == plain.loss);
    const SaeGrads g = backward(p, act_of(ActivationKind::kRelu), lcfg, prefixes, x, fwd);
    for (std::size_t b = 0; b < 4; ++b) CHECK(g.blocks[b] == plain.grads.blocks[b]);
  }
}

TEST_CASE("ground-truth toy parameters reconstruct exactly") {
  Rng rng(5);
  const FeatureTree tree = build_default_tree(rng);
  SaeParams p;
  p.w_enc = tree.directions();
  p.w_dec = tree.directions();
  p.b_enc = Matrix(1, 20);
  p.b_dec = Matrix(1, 20);
  const ToyBatch batch = sample_batch(tree, 500, rng);
  const std::vector<std::size_t> prefixes = {5, 10, 20};
  const auto fwd = forward_loss(p, act_of(ActivationKind::kRelu), LossCfg{}, prefixes, batch.x);
  CHECK(fwd.breakdown.per_prefix_mse.back() < 1e-28);
  CHECK(fwd.breakdown.per_prefix_mse.front() > fwd.breakdown.per_prefix_mse.back());
}

TEST_CASE("gradients match finite differences on random instances") {
  Rng rng(6);
  const ActivationKind kinds[] = {ActivationKind::kRelu, ActivationKind::kTopK,
                                  ActivationKind::kBatchTopK};
  int checked = 0;
  for (int t = 0; t < 24; ++t) {
    const std::size_t m = 6 + rng.below(7), n = 4 + rng.below(5);
    const ActivationCfg act = act_of(kinds[t % 3], 2);
    LossCfg lcfg;
    lcfg.weighting = (t / 3) % 2 ? LossWeighting::kProportional : LossWeighting::kEqual;
    lcfg.stop_gradient = (t / 6) % 2 == 1;
    lcfg.l1_coeff = 0.05 + 0.1 * rng.uniform();
    lcfg.aux_coeff = 0.25;
    lcfg.aux_k = 2;

    SaeParams p;
    Matrix x;
    do {
      p = random_params(m, n, rng);
      x = random_matrix(4, n, rng);
    } while (!well_separated(pre_activations(p, x), 5e-4));

    std::vector<std::size_t> prefixes = {m / 3, (2 * m) / 3, m};
    if (t % 4 == 3) prefixes = draw_schedule(PrefixSchedule::random(m, 4), rng);
    LossOptions opts;
    opts.dead_mask.assign(m, 0);
    for (std::size_t j = 0; j < m; j += 2) opts.dead_mask[j] = 1;

    const FdReport rep = fd_check(p, act, lcfg, prefixes, x, opts);
    INFO("instance " << t << " kind " << to_string(act.kind) << " worst block " << rep.block);
    CHECK(rep.worst < 1e-4);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("all-dead aux with aux_k = m matches finite differences") {
  Rng rng(7);
  SaeParams p;
  Matrix x;
  do {
    p = random_params(6, 5, rng);
    x = random_matrix(4, 5, rng);
  } while (!well_separated(pre_activations(p, x), 5e-4));
  LossCfg lcfg;
  lcfg.aux_coeff = 1.0;
  lcfg.aux_k = 6;
  LossOptions opts;
  opts.dead_mask.assign(6, 1);
  const std::vector<std::size_t> prefixes = {6};
  CHECK(fd_check(p, act_of(ActivationKind::kRelu), lcfg, prefixes, x, opts).worst < 1e-4);
}

TEST_CASE("no active latents: decoder gradient vanishes") {
  Rng rng(8);
  SaeParams p = random_params(6, 5, rng);
  p.b_enc = Matrix(1, 6, -100.0);
  const Matrix x = random_matrix(4, 5, rng);
  const std::vector<std::size_t> prefixes = {2, 6};
  LossCfg lcfg;
  lcfg.l1_coeff = 0.5;
  const auto act = act_of(ActivationKind::kRelu);
  const SaeGrads g = backward(p, act, lcfg, prefixes, x);
  CHECK(g[kWDec] == Matrix(6, 5));
  CHECK(g[kWEnc] == Matrix(6, 5));
  const Matrix mean = column_means(x);
  for (std::size_t c = 0; c < 5; ++c) {
    CHECK(g[kBDec](0, c) == doctest::Approx(2.0 * (p.b_dec(0, c) - mean(0, c)) / 5.0));
  }
  CHECK(fd_check(p, act, lcfg, prefixes, x, {}).worst < 1e-4);
}

TEST_CASE("aux loss") {
  Rng rng(9);
  const SaeParams p = random_params(6, 4, rng);
  const Matrix x = random_matrix(5, 4, rng);
  const std::vector<std::size_t> prefixes = {3, 6};
  const auto act = act_of(ActivationKind::kRelu);

  LossCfg with_aux;
  with_aux.aux_coeff = 0.5;
  LossCfg without = with_aux;
  without.aux_coeff = 0.0;
  LossOptions none;
  none.dead_mask.assign(6, 0);
  const auto fwd = forward_loss(p, act, with_aux, prefixes, x, none);
  CHECK(fwd.breakdown.aux_term == 0.0);
  const SaeGrads a = backward(p, act, with_aux, prefixes, x, none);
  const SaeGrads b = backward(p, act, without, prefixes, x, none);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.blocks[i] == b.blocks[i]);

  // One dead latent whose decoder row is parallel to the residual.
  SaeParams q;
  q.w_dec = Matrix{{1, 0, 0}, {0, 1, 0}};
  q.w_enc = q.w_dec;
  q.b_enc = Matrix(1, 2);
  q.b_dec = Matrix(1, 3);
  const Matrix residual{{2, 0, 0}, {1, 0, 0}};
  const Matrix pre{{0.5, 0.2}, {0.3, -1.0}};
  const std::vector<std::uint8_t> dead = {1, 0};
  const AuxResult r = aux_loss(q, pre, residual, dead, 1);
  CHECK(r.value < sum_squares(residual) / 6.0);
  CHECK(r.codes == Matrix{{0.5, 0}, {0.3, 0}});
  const std::vector<std::uint8_t> alive = {0, 0};
  CHECK(aux_loss(q, pre, residual, alive, 1).value == 0.0);
}

TEST_CASE("stop-gradient confines each group to its own stage") {
  Rng rng(10);
  const SaeParams p = random_params(9, 5, rng);
  const Matrix x = random_matrix(6, 5, rng);
  const std::vector<std::size_t> prefixes = {3, 6, 9};
  const auto act = act_of(ActivationKind::kRelu);

  auto decoder_rows = [&](bool stop, double late_weight, std::size_t begin, std::size_t end) {
    LossCfg lcfg;
    lcfg.stop_gradient = stop;
    LossOptions opts;
    opts.weights = {0.3, 0.3, late_weight};
    const Detached det = detach_at(p, act, lcfg, prefixes, x, opts);
    opts.detached = &det;
    return backward(p, act, lcfg, prefixes, x, opts)[kWDec].row_block(begin, end);
  };
  // Changing the last stage's weight leaves groups 0 and 1 untouched only
  // when partial reconstructions are detached.
  CHECK(decoder_rows(true, 0.4, 0, 6) == decoder_rows(true, 0.9, 0, 6));
  CHECK(decoder_rows(false, 0.4, 0, 6) != decoder_rows(false, 0.9, 0, 6));
  CHECK(decoder_rows(true, 0.4, 6, 9) != decoder_rows(true, 0.9, 6, 9));

  LossCfg lcfg;
  lcfg.stop_gradient = true;
  Detached wrong;
  wrong.partials.resize(1);
  LossOptions opts;
  opts.detached = &wrong;
  CHECK_THROWS_AS(forward_loss(p, act, lcfg, prefixes, x, opts), ShapeError);
}

TEST_CASE("breakdown json") {
  Rng rng(11);
  const SaeParams p = random_params(4, 3, rng);
  const std::vector<std::size_t> prefixes = {2, 4};
  const auto j = to_json(forward_loss(p, act_of(ActivationKind::kRelu), LossCfg{}, prefixes,
                                      random_matrix(2, 3, rng))
                             .breakdown);
  for (const char* key : {"per_prefix_mse", "weights", "l1", "aux", "total"}) {
    CHECK(j.contains(key));
  }
}
