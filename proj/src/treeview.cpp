#include "msae/treeview.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "msae/analysis.hpp"
#include "msae/error.hpp"

namespace msae {

bool LatentTree::is_forest() const {
  std::map<LatentRef, LatentRef> parent_of;
  for (const auto& e : edges) {
    if (!parent_of.emplace(e.child, e.parent).second) return false;
  }
  for (const auto& [start, _] : parent_of) {
    LatentRef cur = start;
    std::size_t hops = 0;
    for (auto it = parent_of.find(cur); it != parent_of.end(); it = parent_of.find(cur)) {
      cur = it->second;
      if (cur == start || ++hops > parent_of.size()) return false;
    }
  }
  return true;
}

std::size_t LatentTree::depth() const {
  std::map<LatentRef, LatentRef> parent_of;
  for (const auto& e : edges) parent_of.emplace(e.child, e.parent);
  std::size_t best = 0;
  for (const auto& [start, _] : parent_of) {
    std::size_t d = 0;
    LatentRef cur = start;
    for (auto it = parent_of.find(cur); it != parent_of.end() && d <= parent_of.size();
         it = parent_of.find(cur)) {
      cur = it->second;
      ++d;
    }
    best = std::max(best, d);
  }
  return best;
}

std::optional<double> directed_mcs(std::span<const double> a, std::span<const double> b,
                                   double fire_eps) {
  if (a.size() != b.size()) {
    throw ShapeError("directed_mcs: token counts differ (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
  double ab = 0.0, aa = 0.0, bb = 0.0, max_a = 0.0, max_b = 0.0;
  bool any = false;
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (!(b[t] > fire_eps)) continue;
    any = true;
    const double at = a[t] > fire_eps ? a[t] : 0.0;
    ab += at * b[t];
    aa += at * at;
    bb += b[t] * b[t];
    max_a = std::max(max_a, at);
    max_b = std::max(max_b, b[t]);
  }
  if (!any) return std::nullopt;
  if (max_a <= 0.0 || aa == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb)) * (max_b / max_a);
}

namespace {

std::vector<double> column(const Matrix& m, std::size_t c) {
  std::vector<double> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = m(r, c);
  return out;
}

}  // namespace

std::optional<double> directed_mcs(const Matrix& acts_a, std::size_t col_a, const Matrix& acts_b,
                                   std::size_t col_b, double fire_eps) {
  if (col_a >= acts_a.cols() || col_b >= acts_b.cols()) {
    throw RangeError("directed_mcs: latent index out of range");
  }
  const auto a = column(acts_a, col_a);
  const auto b = column(acts_b, col_b);
  return directed_mcs(a, b, fire_eps);
}

SaeParams slice_prefix(const SaeParams& params, std::size_t prefix) {
  if (prefix < 1 || prefix > params.dict_size()) {
    throw RangeError("slice_prefix: prefix " + std::to_string(prefix) + " outside [1, " +
                     std::to_string(params.dict_size()) + "]");
  }
  SaeParams p;
  p.w_enc = params.w_enc.row_block(0, prefix);
  p.b_enc = params.b_enc.col_block(0, prefix);
  p.w_dec = params.w_dec.row_block(0, prefix);
  p.b_dec = params.b_dec;
  p.pre_encoder_bias = params.pre_encoder_bias;
  return p;
}

std::vector<ChainMember> prefix_chain(const SaeParams& params, const ActivationCfg& cfg,
                                      std::span<const std::size_t> prefixes,
                                      const std::string& name) {
  std::vector<ChainMember> chain;
  for (auto p : prefixes) {
    if (p == params.dict_size()) continue;
    ActivationCfg sub = cfg;
    if (sub.kind != ActivationKind::kRelu) sub.k = std::min(sub.k, p);
    chain.push_back({name + "[:" + std::to_string(p) + "]", slice_prefix(params, p), sub});
  }
  std::sort(chain.begin(), chain.end(), [](const ChainMember& a, const ChainMember& b) {
    return a.params.dict_size() < b.params.dict_size();
  });
  chain.push_back({name, params, cfg});
  return chain;
}

LatentTree build_tree_from_acts(const std::vector<Matrix>& acts, double threshold) {
  LatentTree tree;
  for (std::size_t s = 0; s < acts.size(); ++s) {
    if (s > 0 && acts[s].rows() != acts[0].rows()) {
      throw ShapeError("build_tree: SAEs were evaluated on different token counts");
    }
    for (std::size_t j = 0; j < acts[s].cols(); ++j) {
      double mx = 0.0;
      for (std::size_t t = 0; t < acts[s].rows(); ++t) mx = std::max(mx, acts[s](t, j));
      tree.nodes.push_back({{s, j}, mx});
    }
  }
  for (std::size_t s = 1; s < acts.size(); ++s) {
    const Matrix& parents = acts[s - 1];
    const Matrix& children = acts[s];
    for (std::size_t c = 0; c < children.cols(); ++c) {
      const auto bcol = column(children, c);
      std::vector<McsEdge> candidates;
      for (std::size_t p = 0; p < parents.cols(); ++p) {
        const auto acol = column(parents, p);
        const auto score = directed_mcs(acol, bcol);
        if (score && *score >= threshold) candidates.push_back({{s - 1, p}, {s, c}, *score});
      }
      if (candidates.empty()) continue;
      std::size_t best = 0;
      for (std::size_t i = 1; i < candidates.size(); ++i) {
        if (candidates[i].score > candidates[best].score) best = i;
      }
      tree.edges.push_back(candidates[best]);
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (i != best) tree.dropped_edges.push_back(candidates[i]);
      }
    }
  }
  return tree;
}

LatentTree build_tree(const std::vector<ChainMember>& chain, const Matrix& eval, double threshold) {
  std::vector<Matrix> acts;
  for (const auto& member : chain) {
    acts.push_back(encode(member.params, member.cfg, eval, eval_mode(member.cfg)));
  }
  LatentTree tree = build_tree_from_acts(acts, threshold);
  for (const auto& member : chain) tree.sae_names.push_back(member.name);
  return tree;
}

namespace {

nlohmann::json ref_json(const LatentRef& r) { return {{"sae_id", r.sae_id}, {"index", r.index}}; }

nlohmann::json edges_json(const std::vector<McsEdge>& edges) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : edges) {
    out.push_back({{"parent", ref_json(e.parent)}, {"child", ref_json(e.child)}, {"score", e.score}});
  }
  return out;
}

}  // namespace

nlohmann::json to_json(const LatentTree& t) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : t.nodes) {
    nodes.push_back({{"sae_id", n.ref.sae_id}, {"index", n.ref.index}, {"max_activation", n.max_activation}});
  }
  return {{"saes", t.sae_names},
          {"nodes", nodes},
          {"edges", edges_json(t.edges)},
          {"dropped_edges", edges_json(t.dropped_edges)},
          {"depth", t.depth()}};
}

void write_edges_csv(std::ostream& out, const LatentTree& t) {
  out << "parent_sae,parent_index,child_sae,child_index,score,kept\n";
  auto row = [&](const McsEdge& e, int kept) {
    out << e.parent.sae_id << ',' << e.parent.index << ',' << e.child.sae_id << ','
        << e.child.index << ',' << e.score << ',' << kept << '\n';
  };
  for (const auto& e : t.edges) row(e, 1);
  for (const auto& e : t.dropped_edges) row(e, 0);
}

}  // namespace msae
