#include "msae/app/commands.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "msae/error.hpp"
#include "msae/tensor_io.hpp"

namespace msae::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream out(path, std::ios::out | mode);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

double resolve_target(const RunConfig& cfg, const std::optional<FeatureTree>& tree) {
  if (cfg.train.sparsity.target_l0 > 0.0) return cfg.train.sparsity.target_l0;
  if (!cfg.train.controller_active()) return 0.0;
  if (!tree) {
    throw ConfigError("train.sparsity.target_l0 must be set when data.source is not 'tree'");
  }
  return expected_l0(*tree);
}

std::vector<std::size_t> bounds_for(const RunConfig& cfg, const ModelCheckpoint& ckpt) {
  if (!cfg.analysis.group_bounds.empty()) return cfg.analysis.group_bounds;
  const std::size_t m = ckpt.params.dict_size();
  if (ckpt.meta.contains("schedule")) {
    return default_group_bounds(schedule_from_json(ckpt.meta.at("schedule"), m), m);
  }
  return default_group_bounds(PrefixSchedule::random(m), m);
}

}  // namespace

void prepare_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out_dir.string() + "': " + ec.message());
  write_json(cfg.out_dir / kConfigFile, to_json(cfg));
}

GenDataResult cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  prepare_out_dir(cfg);
  GenDataResult res{load_or_build_tree(cfg), std::nullopt};
  write_json(cfg.out_dir / kTreeFile, tree_to_json(res.tree));
  log << "tree: " << res.tree.num_features() << " features in " << res.tree.dim()
      << " dims, expected L0 " << expected_l0(res.tree) << "\n";
  if (cfg.data.dump > 0) {
    Rng rng = Rng(cfg.tree.seed).fork(20);
    const ToyBatch batch = sample_batch(res.tree, cfg.data.dump, rng);
    res.dump = cfg.out_dir / kDumpFile;
    save_tensor(*res.dump, batch.x, {{"kind", "toy-activations"}, {"samples", cfg.data.dump}});
    log << "dumped " << cfg.data.dump << " samples to " << res.dump->string() << "\n";
  }
  return res;
}

TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& opts, std::ostream& log) {
  prepare_out_dir(cfg);
  std::optional<FeatureTree> tree;
  BatchSampler sampler;
  std::size_t input_dim = 0;
  switch (cfg.data.source) {
    case DataSource::kTree:
      tree = load_or_build_tree(cfg);
      write_json(cfg.out_dir / kTreeFile, tree_to_json(*tree));
      sampler = tree_sampler(*tree);
      input_dim = tree->dim();
      break;
    case DataSource::kGaussian:
      sampler = gaussian_sampler(cfg.data.dim);
      input_dim = cfg.data.dim;
      break;
    case DataSource::kDataset: {
      Matrix data = load_tensor(*cfg.data.dataset);
      input_dim = data.cols();
      sampler = replay_sampler(std::move(data));
      break;
    }
  }
  const double target = resolve_target(cfg, tree);

  std::optional<TrainState> resume;
  if (opts.resume) {
    resume = train_state_from_checkpoint(load_checkpoint(*opts.resume));
    log << "resuming from step " << resume->step << "\n";
  }
  auto log_out = open_out(cfg.out_dir / kLogFile, opts.resume ? std::ios::app : std::ios::trunc);
  TrainHooks hooks;
  hooks.log_stream = &log_out;
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_checkpoint(cfg.out_dir / ("checkpoint_step" + std::to_string(s.step) + ".msae"),
                    to_checkpoint(s, cfg.train));
  };
  TrainResult res = train_loop(sampler, input_dim, cfg.train, target, std::move(resume), hooks);
  log_out.flush();

  ModelCheckpoint ckpt = to_checkpoint(res.state, cfg.train);
  if (cfg.train.activation.kind == ActivationKind::kBatchTopK && cfg.data.calibration_batches > 0) {
    Rng rng = Rng(cfg.train.seed).fork(4);
    std::vector<Matrix> batches;
    for (std::size_t i = 0; i < cfg.data.calibration_batches; ++i) {
      batches.push_back(sampler(i, cfg.train.batch_size, rng));
    }
    ckpt.activation.threshold = calibrate_threshold(res.state.params, cfg.train.activation, batches);
    log << "calibrated threshold " << *ckpt.activation.threshold << "\n";
  }
  save_checkpoint(cfg.out_dir / kCheckpointFile, ckpt);
  log << "trained to step " << res.state.step << " in " << std::fixed << std::setprecision(1)
      << res.seconds << " s" << std::defaultfloat << "; final lambda " << res.state.lambda << "\n";
  return res;
}

AnalysisReport cmd_eval(const RunConfig& cfg, const EvalOptions& opts, std::ostream& log) {
  const ModelCheckpoint ckpt = load_checkpoint(opts.checkpoint);
  const FeatureTree tree = load_or_build_tree(cfg);
  if (ckpt.params.input_dim() != tree.dim()) {
    throw ConfigError("checkpoint input dim " + std::to_string(ckpt.params.input_dim()) +
                      " does not match tree dim " + std::to_string(tree.dim()));
  }
  std::optional<ModelCheckpoint> other;
  if (opts.compare_checkpoint) {
    other = load_checkpoint(*opts.compare_checkpoint);
    if (other->params.input_dim() != tree.dim()) {
      throw ConfigError("comparison checkpoint input dim " +
                        std::to_string(other->params.input_dim()) + " does not match tree dim " +
                        std::to_string(tree.dim()));
    }
  }
  prepare_out_dir(cfg);

  AnalysisOptions aopts = cfg.analysis;
  aopts.group_bounds = bounds_for(cfg, ckpt);
  const AnalysisReport report = analyze(ckpt.params, ckpt.activation, tree, aopts);
  write_json(cfg.out_dir / kReportFile, to_json(report));
  {
    auto out = open_out(cfg.out_dir / kHeatmapFile);
    write_heatmap_csv(out, report.match);
  }
  {
    auto out = open_out(cfg.out_dir / kFreqFile);
    write_frequency_csv(out, report.latent_freq);
  }
  {
    Rng rng = Rng(cfg.analysis.seed).fork(12);
    const ToyBatch batch = sample_batch(tree, std::max<std::size_t>(1, cfg.raster_samples), rng);
    std::vector<RasterModel> models = {{opts.checkpoint.stem().string(), &ckpt.params, ckpt.activation}};
    if (other) {
      models.push_back({opts.compare_checkpoint->stem().string(), &other->params, other->activation});
    }
    auto out = open_out(cfg.out_dir / kRasterFile);
    write_raster_csv(out, activation_raster(tree, batch, models));
  }
  log << "fvu " << report.fvu << ", l0 " << report.l0_mean << ", absorption "
      << report.absorption.aggregate << (report.absorption.reliable ? "" : " (low confidence)")
      << ", avg max cos " << report.avg_max_cos << "\n";
  if (!report.absorption.reliable) log << "warning: " << report.absorption.note << "\n";
  return report;
}

json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string cmd_compare(const json& report_a, const json& report_b,
                        const std::optional<fs::path>& out_dir, const std::string& name_a,
                        const std::string& name_b) {
  struct Row {
    const char* label;
    json::json_pointer ptr;
  };
  const std::vector<Row> rows = {{"fvu", json::json_pointer("/fvu")},
                                 {"l0_mean", json::json_pointer("/l0_mean")},
                                 {"absorption_rate", json::json_pointer("/absorption_rate/aggregate")},
                                 {"avg_max_cos", json::json_pointer("/avg_max_cos")},
                                 {"meta_sae_fvu", json::json_pointer("/meta_sae_fvu")}};
  std::string missing;
  for (const auto& [report, name] : {std::pair{&report_a, &name_a}, std::pair{&report_b, &name_b}}) {
    for (const auto& r : rows) {
      if (!report->contains(r.ptr)) missing += " " + *name + ":" + r.ptr.to_string();
    }
  }
  if (!missing.empty()) throw ConfigError("report schema mismatch, missing keys:" + missing);

  std::ostringstream md;
  std::ostringstream csv;
  md << std::setprecision(6);
  csv << std::setprecision(std::numeric_limits<double>::max_digits10);
  md << "| metric | " << name_a << " | " << name_b << " | delta (" << name_a << " - " << name_b
     << ") |\n|---|---|---|---|\n";
  csv << "metric," << name_a << ',' << name_b << ",delta\n";
  for (const auto& r : rows) {
    const json& va = report_a.at(r.ptr);
    const json& vb = report_b.at(r.ptr);
    md << "| " << r.label << " | ";
    csv << r.label << ',';
    if (va.is_number() && vb.is_number()) {
      const double a = va.get<double>();
      const double b = vb.get<double>();
      md << a << " | " << b << " | " << a - b << " |\n";
      csv << a << ',' << b << ',' << a - b << '\n';
    } else {
      auto show = [](const json& v) { return v.is_number() ? v.dump() : std::string("n/a"); };
      md << show(va) << " | " << show(vb) << " | n/a |\n";
      csv << show(va) << ',' << show(vb) << ",\n";
    }
  }
  if (out_dir) {
    std::error_code ec;
    fs::create_directories(*out_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + out_dir->string() + "'");
    write_text(*out_dir / kCompareMd, md.str());
    write_text(*out_dir / kCompareCsv, csv.str());
  }
  return md.str();
}

LatentTree cmd_tree(const RunConfig& cfg, const std::vector<fs::path>& checkpoints,
                    std::ostream& log) {
  if (checkpoints.empty()) throw ConfigError("tree: at least one checkpoint is required");
  std::vector<ChainMember> chain;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const ModelCheckpoint ckpt = load_checkpoint(checkpoints[i]);
    const std::string name = checkpoints[i].stem().string();
    if (i + 1 < checkpoints.size()) {
      chain.push_back({name, ckpt.params, ckpt.activation});
      continue;
    }
    std::vector<std::size_t> prefixes = cfg.treeview.prefixes;
    if (prefixes.empty()) prefixes = bounds_for(cfg, ckpt);
    for (auto& m : prefix_chain(ckpt.params, ckpt.activation, prefixes, name)) {
      chain.push_back(std::move(m));
    }
  }
  for (std::size_t i = 1; i < chain.size(); ++i) {
    if (chain[i].params.input_dim() != chain[0].params.input_dim()) {
      throw ConfigError("tree: checkpoints disagree on input dim");
    }
  }
  const FeatureTree tree = load_or_build_tree(cfg);
  if (tree.dim() != chain[0].params.input_dim()) {
    throw ConfigError("tree: checkpoint input dim " + std::to_string(chain[0].params.input_dim()) +
                      " does not match tree dim " + std::to_string(tree.dim()));
  }
  prepare_out_dir(cfg);
  Rng rng = Rng(cfg.analysis.seed).fork(13);
  const Matrix eval = sample_batch(tree, cfg.treeview.samples, rng).x;
  const LatentTree lt = build_tree(chain, eval, cfg.treeview.threshold);

  bool any_active = false;
  for (const auto& n : lt.nodes) any_active = any_active || n.max_activation > 0.0;
  if (!any_active) log << "warning: no latent fired on the eval stream; the forest is empty\n";
  write_json(cfg.out_dir / kLatentTreeFile, to_json(lt));
  {
    auto out = open_out(cfg.out_dir / kLatentTreeCsv);
    write_edges_csv(out, lt);
  }
  log << "latent tree: " << lt.nodes.size() << " nodes, " << lt.edges.size() << " edges, "
      << lt.dropped_edges.size() << " dropped, depth " << lt.depth() << "\n";
  return lt;
}

}  // namespace msae::app
