#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/matrix.hpp"
#include "msae/rng.hpp"

namespace msae {

// Hierarchy of binary features. Feature f is drawn with probability
// edge_prob[f] whenever its parent is active; the implicit root is always
// active and features attached to it have parent == kRoot.
class FeatureTree {
 public:
  static constexpr std::int64_t kRoot = -1;

  FeatureTree() = default;
  // Validates the forest structure, probabilities and unit directions.
  FeatureTree(std::vector<std::int64_t> parent, std::vector<double> edge_prob, Matrix directions);

  std::size_t num_features() const { return parent_.size(); }
  std::size_t dim() const { return directions_.cols(); }
  std::int64_t parent(std::size_t f) const { return parent_[f]; }
  const std::vector<std::int64_t>& parents() const { return parent_; }
  const std::vector<double>& edge_probs() const { return edge_prob_; }
  const Matrix& directions() const { return directions_; }
  // Features ordered so every parent precedes its children.
  const std::vector<std::size_t>& topo_order() const { return order_; }
  std::vector<std::size_t> children(std::size_t f) const;
  std::vector<std::size_t> roots() const;

  // Exact marginal probability that feature f is active.
  double marginal(std::size_t f) const;

 private:
  std::vector<std::int64_t> parent_;
  std::vector<double> edge_prob_;
  Matrix directions_;
  std::vector<std::size_t> order_;
};

struct ToyBatch {
  Matrix x;                         // batch x dim
  std::vector<std::uint8_t> active; // batch x num_features, row-major
  std::size_t num_features = 0;

  bool is_active(std::size_t sample, std::size_t feature) const {
    return active[sample * num_features + feature] != 0;
  }
};

struct DefaultTreeOptions {
  std::size_t num_parents = 4;
  std::size_t children_per_parent = 4;
  double parent_prob = 0.2;
  double child_prob = 0.135;
  std::size_t dim = 20;
  // Orthonormal directions need num_features <= dim; otherwise independent
  // random unit vectors are drawn.
  bool orthonormal = true;
};

// 4 parents x 4 children in d = 20 by default. Feature ids are laid out
// parent-first: parent p is 5p and its children are 5p+1 .. 5p+4.
FeatureTree build_default_tree(Rng& rng, const DefaultTreeOptions& opts = {});

ToyBatch sample_batch(const FeatureTree& tree, std::size_t batch, Rng& rng);

// Sum over features of the product of edge probabilities from the root.
double expected_l0(const FeatureTree& tree);

nlohmann::json tree_to_json(const FeatureTree& tree);
FeatureTree tree_from_json(const nlohmann::json& j);

}  // namespace msae
