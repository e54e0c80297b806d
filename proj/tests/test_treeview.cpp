#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <tuple>

#include "msae/analysis.hpp"
#include "msae/treeview.hpp"
#include "test_support.hpp"

using namespace msae;

namespace {

using EdgeKey = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;

std::set<EdgeKey> edge_keys(const std::vector<McsEdge>& edges) {
  std::set<EdgeKey> out;
  for (const auto& e : edges) out.insert({e.parent.sae_id, e.parent.index, e.child.sae_id, e.child.index});
  return out;
}

Matrix sparse_acts(std::size_t tokens, std::size_t m, Rng& rng) {
  Matrix a(tokens, m);
  for (auto& v : a.values()) v = rng.uniform() < 0.3 ? rng.uniform() * 2.0 : 0.0;
  return a;
}

}  // namespace

TEST_CASE("directed_mcs hand examples") {
  const std::vector<double> a = {2, 2, 0, 0};
  const std::vector<double> b = {1, 0, 1, 0};
  CHECK(*directed_mcs(a, b) == doctest::Approx(0.5 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(*directed_mcs(a, b) == doctest::Approx(0.3536).epsilon(1e-4));
  CHECK(*directed_mcs(b, b) == doctest::Approx(1.0));
  const std::vector<double> off = {0, 5, 0, 5};
  CHECK(*directed_mcs(off, b) == 0.0);
  const std::vector<double> never = {0, 0, 0, 0};
  CHECK_FALSE(directed_mcs(a, never).has_value());

  const Matrix acts{{2, 1}, {2, 0}, {0, 1}, {0, 0}};
  CHECK(*directed_mcs(acts, 0, acts, 1) == doctest::Approx(*directed_mcs(a, b)));
}

TEST_CASE("directed_mcs is scale covariant in B") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(40), b(40);
    for (auto& v : a) v = rng.uniform() < 0.5 ? rng.uniform() : 0.0;
    for (auto& v : b) v = rng.uniform() < 0.5 ? rng.uniform() : 0.0;
    const auto base = directed_mcs(a, b);
    if (!base) continue;
    const double c = 0.1 + 5.0 * rng.uniform();
    std::vector<double> scaled = b;
    for (auto& v : scaled) v *= c;
    CHECK(*directed_mcs(a, scaled) == doctest::Approx(c * *base).epsilon(1e-12));
  }
}

TEST_CASE("multi-parent child goes to the best parent") {
  // Parent SAE with 3 latents, child SAE with 6; only child latent 5 fires.
  Matrix parents(4, 3), children(4, 6);
  children(0, 5) = 1.0;
  children(1, 5) = 1.0;
  parents(0, 1) = parents(1, 1) = 1.0 / 0.7;
  parents(0, 2) = parents(1, 2) = 1.0 / 0.9;
  const LatentTree t = build_tree_from_acts({parents, children}, 0.6);
  REQUIRE(t.edges.size() == 1);
  CHECK(t.edges[0].parent.index == 2);
  CHECK(t.edges[0].child.index == 5);
  CHECK(t.edges[0].score == doctest::Approx(0.9));
  REQUIRE(t.dropped_edges.size() == 1);
  CHECK(t.dropped_edges[0].parent.index == 1);
  CHECK(t.dropped_edges[0].score == doctest::Approx(0.7));
  CHECK(t.is_forest());
  CHECK(t.depth() == 1);
  CHECK(t.nodes.size() == 9);

  // Equal scores resolve to the lower parent index.
  parents(0, 2) = parents(1, 2) = 1.0 / 0.7;
  const LatentTree tie = build_tree_from_acts({parents, children}, 0.6);
  REQUIRE(tie.edges.size() == 1);
  CHECK(tie.edges[0].parent.index == 1);
}

TEST_CASE("single SAE gives isolated roots") {
  Rng rng(2);
  const LatentTree t = build_tree_from_acts({sparse_acts(30, 5, rng)});
  CHECK(t.nodes.size() == 5);
  CHECK(t.edges.empty());
  CHECK(t.depth() == 0);
}

TEST_CASE("random chains are forests and thresholds filter monotonically") {
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const std::vector<Matrix> acts = {sparse_acts(60, 3, rng), sparse_acts(60, 6, rng), sparse_acts(60, 10, rng)};
    std::set<EdgeKey> previous;
    bool first = true;
    for (double threshold : {0.0, 0.2, 0.4, 0.6, 0.8, 1.5, 1e9}) {
      const LatentTree tree = build_tree_from_acts(acts, threshold);
      CHECK(tree.is_forest());
      for (const auto& e : tree.edges) CHECK(e.score >= threshold);
      const auto keys = edge_keys(tree.edges);
      if (!first) CHECK(std::includes(previous.begin(), previous.end(), keys.begin(), keys.end()));
      previous = keys;
      first = false;
    }
    CHECK(build_tree_from_acts(acts, 1e9).edges.empty());
  }
}

TEST_CASE("prefix chain of the exact solution recovers the hierarchy") {
  Rng rng(4);
  const FeatureTree tree = build_default_tree(rng);
  const SaeParams gt = ground_truth_params(tree);

  // Reorder latents so the four parents come first.
  std::vector<std::size_t> order = tree.roots();
  for (std::size_t f = 0; f < tree.num_features(); ++f)
    if (tree.parent(f) != FeatureTree::kRoot) order.push_back(f);
  SaeParams p = gt;
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::copy(gt.w_enc.row(order[i]).begin(), gt.w_enc.row(order[i]).end(), p.w_enc.row(i).begin());
    std::copy(gt.w_dec.row(order[i]).begin(), gt.w_dec.row(order[i]).end(), p.w_dec.row(i).begin());
  }
  const std::vector<std::size_t> prefixes = {4};
  const auto chain = prefix_chain(p, ActivationCfg{}, prefixes, "gt");
  REQUIRE(chain.size() == 2);
  CHECK(chain[0].name == "gt[:4]");
  CHECK(chain[0].params.dict_size() == 4);
  CHECK(slice_prefix(p, 4).w_dec == p.w_dec.row_block(0, 4));

  const Matrix eval = sample_batch(tree, 20000, rng).x;
  const LatentTree lt = build_tree(chain, eval);
  CHECK(lt.is_forest());
  std::vector<std::int64_t> position(tree.num_features());
  for (std::size_t i = 0; i < order.size(); ++i) position[order[i]] = static_cast<std::int64_t>(i);
  std::size_t attached = 0;
  for (std::size_t i = 4; i < 20; ++i) {
    const auto gt_parent = static_cast<std::size_t>(tree.parent(order[i]));
    for (const auto& e : lt.edges) {
      if (e.child.index == i) {
        CHECK(e.parent.index == static_cast<std::size_t>(position[gt_parent]));
        ++attached;
      }
    }
  }
  CHECK(attached == 16);

  const auto j = to_json(lt);
  for (const char* key : {"saes", "nodes", "edges", "dropped_edges", "depth"}) CHECK(j.contains(key));
  std::stringstream csv;
  write_edges_csv(csv, lt);
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == lt.edges.size() + 1);
}
