#pragma once

#include <compare>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/matrix.hpp"
#include "msae/sae.hpp"

namespace msae {

struct LatentRef {
  std::size_t sae_id = 0;
  std::size_t index = 0;

  friend auto operator<=>(const LatentRef&, const LatentRef&) = default;
};

struct McsEdge {
  LatentRef parent;
  LatentRef child;
  double score = 0.0;
};

struct LatentNode {
  LatentRef ref;
  double max_activation = 0.0;
};

struct LatentTree {
  std::vector<LatentNode> nodes;
  std::vector<McsEdge> edges;
  std::vector<McsEdge> dropped_edges;
  std::vector<std::string> sae_names;

  // In-degree <= 1 and no cycles.
  bool is_forest() const;
  // Longest parent->child chain, counted in edges.
  std::size_t depth() const;
};

// Cosine between a and b restricted to tokens where b fires (b > fire_eps),
// times max(b) / max(a) over those tokens. Values of a at or below fire_eps
// count as zero. nullopt if b never fires; 0 if a never fires on b's support.
std::optional<double> directed_mcs(std::span<const double> a, std::span<const double> b,
                                   double fire_eps = 1e-6);
std::optional<double> directed_mcs(const Matrix& acts_a, std::size_t col_a, const Matrix& acts_b,
                                   std::size_t col_b, double fire_eps = 1e-6);

struct ChainMember {
  std::string name;
  SaeParams params;
  ActivationCfg cfg;
};

// First `prefix` latents of an SAE as a standalone smaller SAE.
SaeParams slice_prefix(const SaeParams& params, std::size_t prefix);

// Prefix sub-SAEs of one model, smallest first, ending with the full model.
std::vector<ChainMember> prefix_chain(const SaeParams& params, const ActivationCfg& cfg,
                                      std::span<const std::size_t> prefixes,
                                      const std::string& name = "sae");

// acts[k] is T x m_k for the k-th SAE of a small-to-large chain. For each
// consecutive pair, every child latent keeps its best parent with score >=
// threshold (ties to the lower parent index); the rest go to dropped_edges.
LatentTree build_tree_from_acts(const std::vector<Matrix>& acts, double threshold = 0.6);
LatentTree build_tree(const std::vector<ChainMember>& chain, const Matrix& eval,
                      double threshold = 0.6);

nlohmann::json to_json(const LatentTree& t);
void write_edges_csv(std::ostream& out, const LatentTree& t);

}  // namespace msae
