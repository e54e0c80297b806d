#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/app/run_config.hpp"
#include "msae/treeview.hpp"

namespace msae::app {

// Output file names inside out_dir.
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kTreeFile = "tree.json";
inline constexpr const char* kDumpFile = "data.msae";
inline constexpr const char* kCheckpointFile = "checkpoint.msae";
inline constexpr const char* kLogFile = "log.jsonl";
inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kHeatmapFile = "heatmap.csv";
inline constexpr const char* kRasterFile = "raster.csv";
inline constexpr const char* kFreqFile = "freq.csv";
inline constexpr const char* kLatentTreeFile = "latent_tree.json";
inline constexpr const char* kLatentTreeCsv = "latent_tree.csv";
inline constexpr const char* kCompareMd = "compare.md";
inline constexpr const char* kCompareCsv = "compare.csv";

// Creates out_dir and writes the effective config into it.
void prepare_out_dir(const RunConfig& cfg);

struct GenDataResult {
  FeatureTree tree;
  std::optional<std::filesystem::path> dump;
};
GenDataResult cmd_gen_data(const RunConfig& cfg, std::ostream& log);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
};
TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& opts, std::ostream& log);

struct EvalOptions {
  std::filesystem::path checkpoint;
  // Second model for the raster (e.g. the vanilla baseline).
  std::optional<std::filesystem::path> compare_checkpoint;
};
AnalysisReport cmd_eval(const RunConfig& cfg, const EvalOptions& opts, std::ostream& log);

// Markdown table; also writes compare.md / compare.csv when out_dir is set.
std::string cmd_compare(const nlohmann::json& report_a, const nlohmann::json& report_b,
                        const std::optional<std::filesystem::path>& out_dir,
                        const std::string& name_a = "a", const std::string& name_b = "b");
nlohmann::json load_json_file(const std::filesystem::path& path);

LatentTree cmd_tree(const RunConfig& cfg, const std::vector<std::filesystem::path>& checkpoints,
                    std::ostream& log);

// Full CLI entry point; returns the process exit code
// (0 ok, 1 usage/config, 2 numeric failure, 3 I/O).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace msae::app
