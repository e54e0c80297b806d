#include "msae/app/run_config.hpp"

#include <fstream>
#include <sstream>

#include "msae/error.hpp"
#include "msae/rng.hpp"

namespace msae::app {

namespace {

using nlohmann::json;

std::string source_name(DataSource s) {
  switch (s) {
    case DataSource::kTree: return "tree";
    case DataSource::kGaussian: return "gaussian";
    case DataSource::kDataset: return "dataset";
  }
  return "tree";
}

DataSource source_from_name(const std::string& s) {
  if (s == "tree") return DataSource::kTree;
  if (s == "gaussian") return DataSource::kGaussian;
  if (s == "dataset") return DataSource::kDataset;
  throw ConfigError("data.source: unknown value '" + s + "' (expected tree, gaussian or dataset)");
}

json optional_path(const std::optional<std::filesystem::path>& p) {
  return p ? json(p->string()) : json(nullptr);
}

std::optional<std::filesystem::path> path_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return std::filesystem::path(j.get<std::string>());
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"toy-matryoshka", "toy-vanilla", "gemma-shape-65k"};
  return names;
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "toy-matryoshka") {
    c.train = toy_matryoshka_config();
  } else if (name == "toy-vanilla") {
    c.train = toy_vanilla_config();
  } else if (name == "gemma-shape-65k") {
    c.train = gemma_shape_65k_config();
    c.data.source = DataSource::kGaussian;
    c.data.dim = 2304;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  return c;
}

json to_json(const RunConfig& c) {
  const auto& t = c.tree.options;
  const auto& a = c.analysis;
  return {
      {"preset", c.preset},
      {"out_dir", c.out_dir.string()},
      {"train", to_json(c.train)},
      {"tree",
       {{"path", optional_path(c.tree.path)},
        {"seed", c.tree.seed},
        {"num_parents", t.num_parents},
        {"children_per_parent", t.children_per_parent},
        {"parent_prob", t.parent_prob},
        {"child_prob", t.child_prob},
        {"dim", t.dim},
        {"orthonormal", t.orthonormal}}},
      {"data",
       {{"source", source_name(c.data.source)},
        {"dim", c.data.dim},
        {"dataset", optional_path(c.data.dataset)},
        {"dump", c.data.dump},
        {"calibration_batches", c.data.calibration_batches}}},
      {"analysis",
       {{"eval_samples", a.eval_samples},
        {"eval_batch", a.eval_batch},
        {"fire_eps", a.absorption.fire_eps},
        {"min_match_cosine", a.absorption.min_match_cosine},
        {"group_bounds", a.group_bounds},
        {"run_meta", a.run_meta},
        {"meta_steps", a.meta.steps},
        {"meta_lr", a.meta.lr},
        {"meta_k", a.meta.k},
        {"seed", a.seed},
        {"raster_samples", c.raster_samples}}},
      {"treeview",
       {{"threshold", c.treeview.threshold},
        {"samples", c.treeview.samples},
        {"prefixes", c.treeview.prefixes}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  const std::string preset = j.value("preset", std::string("toy-matryoshka"));
  const RunConfig base = preset_config(preset);
  json full = to_json(base);
  check_known_keys(full, j);
  full.merge_patch(j);
  // merge_patch drops keys set to null; restore the nullable path keys.
  if (!full["tree"].contains("path")) full["tree"]["path"] = nullptr;
  if (!full["data"].contains("dataset")) full["data"]["dataset"] = nullptr;

  try {
    RunConfig c;
    c.preset = preset;
    c.out_dir = full.at("out_dir").get<std::string>();
    c.train = train_config_from_json(full.at("train"));

    const auto& tj = full.at("tree");
    c.tree.path = path_from(tj.at("path"));
    c.tree.seed = tj.at("seed").get<std::uint64_t>();
    c.tree.options.num_parents = tj.at("num_parents").get<std::size_t>();
    c.tree.options.children_per_parent = tj.at("children_per_parent").get<std::size_t>();
    c.tree.options.parent_prob = tj.at("parent_prob").get<double>();
    c.tree.options.child_prob = tj.at("child_prob").get<double>();
    c.tree.options.dim = tj.at("dim").get<std::size_t>();
    c.tree.options.orthonormal = tj.at("orthonormal").get<bool>();

    const auto& dj = full.at("data");
    c.data.source = source_from_name(dj.at("source").get<std::string>());
    c.data.dim = dj.at("dim").get<std::size_t>();
    c.data.dataset = path_from(dj.at("dataset"));
    c.data.dump = dj.at("dump").get<std::size_t>();
    c.data.calibration_batches = dj.at("calibration_batches").get<std::size_t>();

    const auto& aj = full.at("analysis");
    c.analysis.eval_samples = aj.at("eval_samples").get<std::size_t>();
    c.analysis.eval_batch = aj.at("eval_batch").get<std::size_t>();
    c.analysis.absorption.fire_eps = aj.at("fire_eps").get<double>();
    c.analysis.absorption.min_match_cosine = aj.at("min_match_cosine").get<double>();
    c.analysis.group_bounds = aj.at("group_bounds").get<std::vector<std::size_t>>();
    c.analysis.run_meta = aj.at("run_meta").get<bool>();
    c.analysis.meta.steps = aj.at("meta_steps").get<std::size_t>();
    c.analysis.meta.lr = aj.at("meta_lr").get<double>();
    c.analysis.meta.k = aj.at("meta_k").get<std::size_t>();
    c.analysis.seed = aj.at("seed").get<std::uint64_t>();
    c.raster_samples = aj.at("raster_samples").get<std::size_t>();

    const auto& vj = full.at("treeview");
    c.treeview.threshold = vj.at("threshold").get<double>();
    c.treeview.samples = vj.at("samples").get<std::size_t>();
    c.treeview.prefixes = vj.at("prefixes").get<std::vector<std::size_t>>();

    c.train.validate();
    if (c.data.source == DataSource::kDataset && !c.data.dataset) {
      throw ConfigError("data.source is 'dataset' but data.dataset is not set");
    }
    if (c.analysis.eval_batch == 0 || c.analysis.eval_samples == 0) {
      throw ConfigError("analysis.eval_samples and analysis.eval_batch must be >= 1");
    }
    if (c.treeview.samples == 0) throw ConfigError("treeview.samples must be >= 1");
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void check_known_keys(const json& schema, const json& value, const std::string& where) {
  if (!value.is_object()) {
    if (where.empty()) throw ConfigError("config root must be a JSON object");
    return;
  }
  if (!schema.is_object()) {
    throw ConfigError("config key '" + where + "' is not an object");
  }
  for (const auto& [key, v] : value.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (schema.at(key).is_object()) check_known_keys(schema.at(key), v, path);
  }
}

std::pair<std::string, json> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("expected KEY=VALUE, got '" + text + "'");
  }
  const std::string key = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {key, value};
}

void apply_override(json& config, const std::string& dotted_key, const json& value) {
  json* node = &config;
  std::stringstream ss(dotted_key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) {
      throw ConfigError("unknown config key '" + dotted_key + "'");
    }
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back())) {
    throw ConfigError("unknown config key '" + dotted_key + "'");
  }
  (*node)[parts.back()] = value;
}

std::vector<std::pair<std::string, std::string>> documented_keys(const json& config) {
  std::vector<std::pair<std::string, std::string>> out;
  auto walk = [&](auto&& self, const json& node, const std::string& prefix) -> void {
    for (const auto& [key, v] : node.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (v.is_object()) {
        self(self, v, path);
      } else {
        out.emplace_back(path, v.dump());
      }
    }
  };
  walk(walk, config, "");
  return out;
}

RunConfig resolve_config(const ConfigSources& sources) {
  json file = json::object();
  if (sources.file) {
    std::ifstream in(*sources.file);
    if (!in) throw IoError("cannot read config file '" + sources.file->string() + "'");
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(sources.file->string() + ": " + e.what());
    }
    if (!file.is_object()) throw ConfigError(sources.file->string() + ": root must be an object");
  }
  std::string preset = file.value("preset", std::string("toy-matryoshka"));
  if (sources.preset) preset = *sources.preset;

  json full = to_json(preset_config(preset));
  check_known_keys(full, file);
  full.merge_patch(file);
  if (!full["tree"].contains("path")) full["tree"]["path"] = nullptr;
  if (!full["data"].contains("dataset")) full["data"]["dataset"] = nullptr;
  full["preset"] = preset;
  for (const auto& [key, value] : sources.overrides) {
    if (key == "preset") throw ConfigError("use --preset to select a preset");
    apply_override(full, key, value);
  }
  return run_config_from_json(full);
}

FeatureTree load_or_build_tree(const RunConfig& cfg) {
  if (cfg.tree.path) {
    std::ifstream in(*cfg.tree.path);
    if (!in) throw IoError("cannot read tree file '" + cfg.tree.path->string() + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw IoError(cfg.tree.path->string() + ": " + e.what());
    }
    return tree_from_json(j);
  }
  Rng rng(cfg.tree.seed);
  return build_default_tree(rng, cfg.tree.options);
}

}  // namespace msae::app
