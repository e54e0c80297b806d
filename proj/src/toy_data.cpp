#include "msae/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msae/error.hpp"
#include "msae/linalg.hpp"

namespace msae {

FeatureTree::FeatureTree(std::vector<std::int64_t> parent, std::vector<double> edge_prob,
                         Matrix directions)
    : parent_(std::move(parent)), edge_prob_(std::move(edge_prob)), directions_(std::move(directions)) {
  const std::size_t n = parent_.size();
  if (edge_prob_.size() != n || directions_.rows() != n) {
    throw ShapeError("FeatureTree: parent, edge_prob and directions disagree on feature count");
  }
  for (std::size_t f = 0; f < n; ++f) {
    const std::int64_t p = parent_[f];
    if (p != kRoot && (p < 0 || static_cast<std::size_t>(p) >= n)) {
      throw ConfigError("FeatureTree: feature " + std::to_string(f) + " has invalid parent " +
                        std::to_string(p));
    }
    if (!(edge_prob_[f] > 0.0 && edge_prob_[f] < 1.0)) {
      throw ConfigError("FeatureTree: edge probability of feature " + std::to_string(f) +
                        " must lie in (0, 1)");
    }
    const double norm = l2_norm(directions_.row(f));
    if (std::abs(norm - 1.0) > 1e-9) {
      throw ConfigError("FeatureTree: direction of feature " + std::to_string(f) +
                        " is not unit norm");
    }
  }

  // Depth-first topological order; a parent chain longer than n means a cycle.
  std::vector<std::uint8_t> placed(n, 0);
  order_.reserve(n);
  for (std::size_t f = 0; f < n; ++f) {
    std::vector<std::size_t> chain;
    std::size_t cur = f;
    while (!placed[cur]) {
      chain.push_back(cur);
      if (chain.size() > n) throw ConfigError("FeatureTree: parent pointers contain a cycle");
      if (parent_[cur] == kRoot) break;
      cur = static_cast<std::size_t>(parent_[cur]);
    }
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      if (!placed[*it]) {
        placed[*it] = 1;
        order_.push_back(*it);
      }
    }
  }
}

std::vector<std::size_t> FeatureTree::children(std::size_t f) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < parent_.size(); ++c) {
    if (parent_[c] == static_cast<std::int64_t>(f)) out.push_back(c);
  }
  return out;
}

std::vector<std::size_t> FeatureTree::roots() const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < parent_.size(); ++c) {
    if (parent_[c] == kRoot) out.push_back(c);
  }
  return out;
}

double FeatureTree::marginal(std::size_t f) const {
  double p = 1.0;
  std::int64_t cur = static_cast<std::int64_t>(f);
  while (cur != kRoot) {
    p *= edge_prob_[static_cast<std::size_t>(cur)];
    cur = parent_[static_cast<std::size_t>(cur)];
  }
  return p;
}

FeatureTree build_default_tree(Rng& rng, const DefaultTreeOptions& opts) {
  const std::size_t group = 1 + opts.children_per_parent;
  const std::size_t n = opts.num_parents * group;
  std::vector<std::int64_t> parent(n);
  std::vector<double> prob(n);
  for (std::size_t p = 0; p < opts.num_parents; ++p) {
    const std::size_t base = p * group;
    parent[base] = FeatureTree::kRoot;
    prob[base] = opts.parent_prob;
    for (std::size_t c = 1; c < group; ++c) {
      parent[base + c] = static_cast<std::int64_t>(base);
      prob[base + c] = opts.child_prob;
    }
  }

  Matrix directions = gaussian_matrix(n, opts.dim, rng);
  if (opts.orthonormal) {
    if (n > opts.dim) {
      throw ConfigError("build_default_tree: orthonormal directions need features <= dim");
    }
    orthonormalize_rows(directions);
  } else {
    normalize_rows(directions);
  }
  return FeatureTree(std::move(parent), std::move(prob), std::move(directions));
}

ToyBatch sample_batch(const FeatureTree& tree, std::size_t batch, Rng& rng) {
  if (batch == 0) throw RangeError("sample_batch: batch must be >= 1");
  const std::size_t nf = tree.num_features();
  const std::size_t d = tree.dim();
  ToyBatch out{Matrix(batch, d), std::vector<std::uint8_t>(batch * nf, 0), nf};
  const auto& order = tree.topo_order();
  for (std::size_t s = 0; s < batch; ++s) {
    std::uint8_t* act = out.active.data() + s * nf;
    // One uniform per feature per sample, regardless of the parent's state,
    // keeps the stream position independent of the sampled outcomes.
    for (std::size_t f : order) {
      const double u = rng.uniform();
      const std::int64_t p = tree.parent(f);
      const bool parent_on = p == FeatureTree::kRoot || act[p] != 0;
      act[f] = (parent_on && u < tree.edge_probs()[f]) ? 1 : 0;
    }
    auto xs = out.x.row(s);
    for (std::size_t f = 0; f < nf; ++f) {
      if (!act[f]) continue;
      auto dir = tree.directions().row(f);
      for (std::size_t c = 0; c < d; ++c) xs[c] += dir[c];
    }
  }
  return out;
}

double expected_l0(const FeatureTree& tree) {
  double total = 0.0;
  for (std::size_t f = 0; f < tree.num_features(); ++f) total += tree.marginal(f);
  return total;
}

nlohmann::json tree_to_json(const FeatureTree& tree) {
  nlohmann::json dirs = nlohmann::json::array();
  for (std::size_t f = 0; f < tree.num_features(); ++f) {
    auto r = tree.directions().row(f);
    dirs.push_back(std::vector<double>(r.begin(), r.end()));
  }
  nlohmann::json parents = nlohmann::json::array();
  for (auto p : tree.parents()) {
    if (p == FeatureTree::kRoot) {
      parents.push_back(nullptr);
    } else {
      parents.push_back(p);
    }
  }
  return {{"num_features", tree.num_features()},
          {"dim", tree.dim()},
          {"parent", parents},
          {"edge_prob", tree.edge_probs()},
          {"directions", dirs},
          {"expected_l0", expected_l0(tree)}};
}

FeatureTree tree_from_json(const nlohmann::json& j) {
  try {
    const auto nf = j.at("num_features").get<std::size_t>();
    const auto d = j.at("dim").get<std::size_t>();
    std::vector<std::int64_t> parent;
    for (const auto& p : j.at("parent")) {
      parent.push_back(p.is_null() ? FeatureTree::kRoot : p.get<std::int64_t>());
    }
    auto prob = j.at("edge_prob").get<std::vector<double>>();
    Matrix dirs(nf, d);
    const auto& rows = j.at("directions");
    if (rows.size() != nf) throw ShapeError("tree JSON: directions has wrong row count");
    for (std::size_t f = 0; f < nf; ++f) {
      auto r = rows[f].get<std::vector<double>>();
      if (r.size() != d) throw ShapeError("tree JSON: direction row has wrong length");
      std::copy(r.begin(), r.end(), dirs.row(f).begin());
    }
    if (parent.size() != nf) throw ShapeError("tree JSON: parent has wrong length");
    return FeatureTree(std::move(parent), std::move(prob), std::move(dirs));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tree JSON: ") + e.what());
  }
}

}  // namespace msae
