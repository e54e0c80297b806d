#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "msae/app/commands.hpp"
#include "msae/error.hpp"

namespace msae::app {

namespace {

struct CommonFlags {
  std::string config;
  std::string preset;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> steps;
  std::string tree;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("-c,--config", f.config, "JSON config file (unknown keys are rejected)");
  cmd->add_option("-p,--preset", f.preset, "toy-matryoshka | toy-vanilla | gemma-shape-65k");
  cmd->add_option("--set", f.sets, "Override any config key: KEY=VALUE (VALUE parsed as JSON)")
      ->take_all();
  cmd->add_option("--seed", f.seed, "Sets train.seed, tree.seed and analysis.seed");
  cmd->add_option("-o,--out", f.out, "Output directory (out_dir)");
  cmd->add_option("--steps", f.steps, "train.steps");
  cmd->add_option("--tree", f.tree, "Load the feature tree from this JSON file (tree.path)");
}

ConfigSources sources_from(const CommonFlags& f) {
  ConfigSources s;
  if (!f.config.empty()) s.file = f.config;
  if (!f.preset.empty()) s.preset = f.preset;
  if (f.seed) {
    s.overrides.emplace_back("train.seed", *f.seed);
    s.overrides.emplace_back("tree.seed", *f.seed);
    s.overrides.emplace_back("analysis.seed", *f.seed);
  }
  if (!f.out.empty()) s.overrides.emplace_back("out_dir", f.out);
  if (f.steps) s.overrides.emplace_back("train.steps", *f.steps);
  if (!f.tree.empty()) s.overrides.emplace_back("tree.path", f.tree);
  for (const auto& text : f.sets) s.overrides.push_back(parse_assignment(text));
  return s;
}

std::string keys_footer() {
  std::ostringstream os;
  os << "Config keys (defaults of the toy-matryoshka preset; override with --set KEY=VALUE):\n";
  for (const auto& [key, value] : documented_keys(to_json(preset_config("toy-matryoshka")))) {
    os << "  " << key << " = " << value << "\n";
  }
  os << "Exit codes: 0 success, 1 usage/config, 2 numeric failure, 3 I/O.\n";
  return os.str();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Matryoshka sparse autoencoder toolkit"};
  app.require_subcommand(1);
  app.footer(keys_footer());

  CommonFlags gen_flags, train_flags, eval_flags, tree_flags;
  std::size_t dump = 0;
  bool dump_set = false;
  auto* gen = app.add_subcommand("gen-data", "Write the feature tree JSON and optionally a sample dump");
  add_common(gen, gen_flags);
  gen->add_option("--dump", dump, "Number of samples to dump (data.dump)")
      ->each([&](const std::string&) { dump_set = true; });

  std::string resume;
  bool dry_run = false;
  auto* train = app.add_subcommand("train", "Train an SAE; writes checkpoint.msae and log.jsonl");
  add_common(train, train_flags);
  train->add_option("--resume", resume, "Resume from a trainer checkpoint");
  train->add_flag("--dry-run", dry_run, "Print the effective config and exit");

  std::string checkpoint, compare_ckpt;
  auto* eval = app.add_subcommand("eval", "Analyze a checkpoint against the feature tree");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to analyze")->required();
  eval->add_option("--compare-checkpoint", compare_ckpt, "Second model for raster.csv");

  std::string report_a, report_b, compare_out;
  auto* compare = app.add_subcommand("compare", "Side-by-side table of two report.json files");
  compare->add_option("report_a", report_a, "First report")->required();
  compare->add_option("report_b", report_b, "Second report")->required();
  compare->add_option("-o,--out", compare_out, "Directory for compare.md and compare.csv");

  std::vector<std::string> tree_ckpts;
  std::optional<double> threshold;
  auto* tree = app.add_subcommand("tree", "Build a latent tree over a chain of checkpoints");
  add_common(tree, tree_flags);
  tree->add_option("checkpoints", tree_ckpts, "Checkpoints ordered small to large")->required();
  tree->add_option("--threshold", threshold, "treeview.threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      auto s = sources_from(gen_flags);
      if (dump_set) s.overrides.emplace_back("data.dump", dump);
      cmd_gen_data(resolve_config(s), err);
    } else if (train->parsed()) {
      const RunConfig cfg = resolve_config(sources_from(train_flags));
      if (dry_run) {
        out << to_json(cfg).dump(2) << "\n";
        return 0;
      }
      TrainOptions opts;
      if (!resume.empty()) opts.resume = resume;
      cmd_train(cfg, opts, err);
    } else if (eval->parsed()) {
      EvalOptions opts;
      opts.checkpoint = checkpoint;
      if (!compare_ckpt.empty()) opts.compare_checkpoint = compare_ckpt;
      cmd_eval(resolve_config(sources_from(eval_flags)), opts, err);
    } else if (compare->parsed()) {
      std::optional<std::filesystem::path> dir;
      if (!compare_out.empty()) dir = compare_out;
      std::string name_a = std::filesystem::path(report_a).parent_path().filename().string();
      std::string name_b = std::filesystem::path(report_b).parent_path().filename().string();
      if (name_a.empty() || name_b.empty() || name_a == name_b) {
        name_a = "a";
        name_b = "b";
      }
      out << cmd_compare(load_json_file(report_a), load_json_file(report_b), dir, name_a, name_b);
    } else if (tree->parsed()) {
      auto s = sources_from(tree_flags);
      if (threshold) s.overrides.emplace_back("treeview.threshold", *threshold);
      std::vector<std::filesystem::path> paths(tree_ckpts.begin(), tree_ckpts.end());
      cmd_tree(resolve_config(s), paths, err);
    }
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace msae::app
