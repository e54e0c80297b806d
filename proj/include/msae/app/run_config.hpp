#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/analysis.hpp"
#include "msae/toy_data.hpp"
#include "msae/trainer.hpp"

namespace msae::app {

struct TreeSpec {
  // When set, the tree is loaded from this JSON file instead of generated.
  std::optional<std::filesystem::path> path;
  std::uint64_t seed = 0;
  DefaultTreeOptions options;
};

enum class DataSource { kTree, kGaussian, kDataset };

struct DataSpec {
  DataSource source = DataSource::kTree;
  // Input width for the gaussian source.
  std::size_t dim = 20;
  std::optional<std::filesystem::path> dataset;
  // gen-data: number of samples to dump (0 = tree only).
  std::size_t dump = 0;
  // Batches drawn to calibrate the BatchTopK inference threshold after training.
  std::size_t calibration_batches = 50;
};

struct TreeViewSpec {
  double threshold = 0.6;
  std::size_t samples = 50000;
  // Prefix sizes used to split the last checkpoint into sub-SAEs. Empty means
  // the checkpoint's fixed sizes, or quartiles for random schedules.
  std::vector<std::size_t> prefixes;
};

struct RunConfig {
  std::string preset = "toy-matryoshka";
  std::filesystem::path out_dir = "runs/default";
  TrainConfig train;
  TreeSpec tree;
  DataSpec data;
  AnalysisOptions analysis;
  std::size_t raster_samples = 200;
  TreeViewSpec treeview;
};

const std::vector<std::string>& preset_names();
// Throws ConfigError for unknown names.
RunConfig preset_config(const std::string& name);

nlohmann::json to_json(const RunConfig& c);
// Strict: every key must be known. Missing keys keep the preset value.
RunConfig run_config_from_json(const nlohmann::json& j);

// Rejects keys absent from `schema`, reporting the dotted path.
void check_known_keys(const nlohmann::json& schema, const nlohmann::json& value,
                      const std::string& where = "");

// "a.b.c=value" with value parsed as JSON, falling back to a plain string.
std::pair<std::string, nlohmann::json> parse_assignment(const std::string& text);
void apply_override(nlohmann::json& config, const std::string& dotted_key,
                    const nlohmann::json& value);

// Flattened "key = default" listing of every config key.
std::vector<std::pair<std::string, std::string>> documented_keys(const nlohmann::json& config);

struct ConfigSources {
  std::optional<std::string> preset;
  std::optional<std::filesystem::path> file;
  std::vector<std::pair<std::string, nlohmann::json>> overrides;
};

// Preset (flag > file "preset" key > default) -> file -> overrides, validated.
RunConfig resolve_config(const ConfigSources& sources);

FeatureTree load_or_build_tree(const RunConfig& cfg);

}  // namespace msae::app
