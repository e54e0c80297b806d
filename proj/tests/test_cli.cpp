#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "msae/analysis.hpp"
#include "msae/app/commands.hpp"
#include "msae/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace msae;
using msae::app::run_cli;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "msae");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

struct Scratch {
  fs::path root;
  Scratch() {
    root = fs::temp_directory_path() / "msae_cli_tests";
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Scratch() { fs::remove_all(root); }
  std::string dir(const std::string& name) const { return (root / name).string(); }
};

// Short training run; small enough for unit tests.
Outcome quick_train(const std::string& out, const std::string& preset = "toy-matryoshka",
                    const std::string& steps = "200") {
  return run({"train", "-p", preset, "--seed", "3", "--steps", steps, "-o", out,
              "--set", "train.log_every=50"});
}

std::vector<std::string> eval_args(const std::string& out, const std::string& ckpt) {
  return {"eval", "--seed", "3", "-o", out, "--checkpoint", ckpt,
          "--set", "analysis.eval_samples=2000", "--set", "analysis.meta_steps=50"};
}

}  // namespace

TEST_CASE("gen-data writes the tree and is reproducible") {
  Scratch s;
  const auto a = run({"gen-data", "--seed", "5", "-o", s.dir("a"), "--dump", "100"});
  REQUIRE(a.code == 0);
  const auto b = run({"gen-data", "--seed", "5", "-o", s.dir("b"), "--dump", "100"});
  REQUIRE(b.code == 0);
  const json tree = read_json(s.root / "a" / "tree.json");
  CHECK(tree.at("expected_l0").get<double>() == doctest::Approx(1.232));
  CHECK(slurp(s.root / "a" / "tree.json") == slurp(s.root / "b" / "tree.json"));
  CHECK(slurp(s.root / "a" / "data.msae") == slurp(s.root / "b" / "data.msae"));
  const Matrix dump = load_tensor(s.root / "a" / "data.msae");
  CHECK(dump.rows() == 100);
  CHECK(dump.cols() == 20);
  CHECK(fs::exists(s.root / "a" / "config.json"));

  REQUIRE(run({"gen-data", "--seed", "5", "-o", s.dir("c"), "--dump", "0"}).code == 0);
  CHECK(fs::exists(s.root / "c" / "tree.json"));
  CHECK_FALSE(fs::exists(s.root / "c" / "data.msae"));

  REQUIRE(run({"gen-data", "--seed", "6", "-o", s.dir("d")}).code == 0);
  CHECK(slurp(s.root / "a" / "tree.json") != slurp(s.root / "d" / "tree.json"));
}

TEST_CASE("presets and dry run") {
  auto r = run({"train", "--dry-run"});
  REQUIRE(r.code == 0);
  json cfg = json::parse(r.out);
  const json& t = cfg.at("train");
  CHECK(t.at("steps") == 40000);
  CHECK(t.at("batch_size") == 200);
  CHECK(t.at("lr") == 3e-2);
  CHECK(t.at("beta1") == 0.5);
  CHECK(t.at("beta2") == 0.9375);
  CHECK(t.at("grad_clip") == 1.0);
  CHECK(t.at("schedule").at("kind") == "random");
  CHECK(t.at("schedule").at("samples_per_batch") == 10);

  r = run({"train", "-p", "toy-vanilla", "--dry-run"});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out).at("train").at("schedule").at("sizes") == json::array({20}));

  r = run({"train", "-p", "gemma-shape-65k", "--dry-run"});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out).at("train").at("schedule").at("sizes") ==
        json::array({2048, 6144, 14336, 30720, 65536}));
}

TEST_CASE("config errors exit 1") {
  Scratch s;
  {
    std::ofstream f(s.root / "bad.json");
    f << R"({"train": {"stepz": 10}})";
  }
  auto r = run({"train", "-c", (s.root / "bad.json").string(), "--dry-run"});
  CHECK(r.code == 1);
  CHECK(r.err.find("train.stepz") != std::string::npos);

  r = run({"train", "--set", "nope.key=1", "--dry-run"});
  CHECK(r.code == 1);
  r = run({"train", "--set", "train.loss.stop_gradient=true", "--dry-run"});
  CHECK(r.code == 1);
  CHECK(r.err.find("stop_gradient") != std::string::npos);
  r = run({"train", "-p", "toy-tiny", "--dry-run"});
  CHECK(r.code == 1);
  r = run({"frobnicate"});
  CHECK(r.code == 1);

  r = run({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("train.sparsity.eta") != std::string::npos);
  CHECK(r.out.find("Exit codes") != std::string::npos);
}

TEST_CASE("i/o and numeric failures map to exit codes") {
  Scratch s;
  auto r = run({"gen-data", "--tree", (s.root / "missing.json").string(), "-o", s.dir("x")});
  CHECK(r.code == 3);
  CHECK(r.err.find("missing.json") != std::string::npos);

  {
    std::ofstream blocker(s.root / "file");
    blocker << "x";
  }
  r = run({"gen-data", "-o", (s.root / "file" / "sub").string()});
  CHECK(r.code == 3);

  r = run({"train", "--steps", "50", "-o", s.dir("nan"), "--set", "train.lr=1e300",
           "--set", "train.grad_clip=1e300"});
  CHECK(r.code == 2);
  CHECK(r.err.find("step") != std::string::npos);
}

TEST_CASE("train, eval, compare") {
  Scratch s;
  REQUIRE(quick_train(s.dir("m")).code == 0);
  REQUIRE(quick_train(s.dir("v"), "toy-vanilla").code == 0);
  for (const char* f : {"checkpoint.msae", "log.jsonl", "config.json", "tree.json"}) {
    CHECK(fs::exists(s.root / "m" / f));
  }
  std::ifstream log(s.root / "m" / "log.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line);) {
    CHECK_NOTHROW(json::parse(line));
    ++lines;
  }
  CHECK(lines == 4);

  const std::string ckpt = (s.root / "m" / "checkpoint.msae").string();
  REQUIRE(run(eval_args(s.dir("e1"), ckpt)).code == 0);
  REQUIRE(run(eval_args(s.dir("e2"), ckpt)).code == 0);
  CHECK(slurp(s.root / "e1" / "report.json") == slurp(s.root / "e2" / "report.json"));
  for (const char* f : {"heatmap.csv", "raster.csv", "freq.csv"}) CHECK(fs::exists(s.root / "e1" / f));

  auto args = eval_args(s.dir("e3"), ckpt);
  args.push_back("--compare-checkpoint");
  args.push_back((s.root / "v" / "checkpoint.msae").string());
  REQUIRE(run(args).code == 0);
  std::ifstream raster(s.root / "e3" / "raster.csv");
  std::string header;
  std::getline(raster, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 60);

  const std::string report = (s.root / "e1" / "report.json").string();
  auto r = run({"compare", report, report, "-o", s.dir("cmp")});
  REQUIRE(r.code == 0);
  const std::string csv = slurp(s.root / "cmp" / "compare.csv");
  std::istringstream rows(csv);
  std::string line;
  std::getline(rows, line);
  std::size_t metric_rows = 0;
  while (std::getline(rows, line)) {
    const auto last = line.substr(line.rfind(',') + 1);
    CHECK(std::stod(last) == 0.0);
    ++metric_rows;
  }
  CHECK(metric_rows == 5);
  CHECK(fs::exists(s.root / "cmp" / "compare.md"));

  json broken = read_json(report);
  broken.erase("avg_max_cos");
  {
    std::ofstream f(s.root / "broken.json");
    f << broken.dump();
  }
  r = run({"compare", report, (s.root / "broken.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("avg_max_cos") != std::string::npos);
}

TEST_CASE("eval of init and exact-solution checkpoints") {
  Scratch s;
  REQUIRE(run({"train", "--seed", "3", "--steps", "0", "-o", s.dir("init")}).code == 0);
  auto r = run(eval_args(s.dir("ei"), (s.root / "init" / "checkpoint.msae").string()));
  REQUIRE(r.code == 0);
  json rep = read_json(s.root / "ei" / "report.json");
  CHECK(rep.at("fvu").get<double>() > 0.5);
  CHECK(rep.at("absorption_rate").at("reliable") == false);
  CHECK(r.err.find("warning") != std::string::npos);

  Rng rng(3);
  const FeatureTree tree = build_default_tree(rng);
  ModelCheckpoint exact;
  exact.params = ground_truth_params(tree);
  const auto exact_path = s.root / "exact.msae";
  save_checkpoint(exact_path, exact);
  REQUIRE(run(eval_args(s.dir("ex"), exact_path.string())).code == 0);
  rep = read_json(s.root / "ex" / "report.json");
  CHECK(rep.at("fvu").get<double>() < 1e-20);
  CHECK(rep.at("absorption_rate").at("aggregate") == 0.0);
  const auto& latents = rep.at("match").at("latent_for_feature");
  for (std::size_t f = 0; f < 20; ++f) CHECK(latents[f] == f);

  r = run({"eval", "--seed", "3", "-o", s.dir("dim"), "--checkpoint", exact_path.string(),
           "--set", "tree.dim=8", "--set", "tree.orthonormal=false"});
  CHECK(r.code == 1);
  CHECK(r.err.find("20") != std::string::npos);
  CHECK(r.err.find("8") != std::string::npos);

  r = run({"tree", exact_path.string(), "--seed", "3", "-o", s.dir("t1"), "--threshold", "1.01",
           "--set", "treeview.samples=5000"});
  REQUIRE(r.code == 0);
  CHECK(read_json(s.root / "t1" / "latent_tree.json").at("edges").empty());
}

TEST_CASE("tree over a trained chain") {
  Scratch s;
  REQUIRE(quick_train(s.dir("m"), "toy-matryoshka", "2000").code == 0);
  const std::string ckpt = (s.root / "m" / "checkpoint.msae").string();
  auto r = run({"tree", ckpt, "--seed", "3", "-o", s.dir("t"), "--set", "treeview.samples=5000"});
  REQUIRE(r.code == 0);
  const json t = read_json(s.root / "t" / "latent_tree.json");
  CHECK(t.at("saes").size() == 4);
  CHECK(t.at("depth").get<std::size_t>() >= 1);
  CHECK(fs::exists(s.root / "t" / "latent_tree.csv"));

  r = run({"tree", ckpt, "--seed", "3", "-o", s.dir("t0"), "--threshold", "1e9",
           "--set", "treeview.samples=5000"});
  REQUIRE(r.code == 0);
  CHECK(read_json(s.root / "t0" / "latent_tree.json").at("edges").empty());

  // A single checkpoint with the prefix chain collapsed to the full model.
  r = run({"tree", ckpt, "--seed", "3", "-o", s.dir("t2"), "--set", "treeview.prefixes=[20]",
           "--set", "treeview.samples=2000"});
  REQUIRE(r.code == 0);
  const json single = read_json(s.root / "t2" / "latent_tree.json");
  CHECK(single.at("edges").empty());
  CHECK(single.at("nodes").size() == 20);
}

TEST_CASE("echoed config reproduces the run and resume matches") {
  Scratch s;
  REQUIRE(quick_train(s.dir("a")).code == 0);
  REQUIRE(run({"train", "-c", (s.root / "a" / "config.json").string(), "-o", s.dir("b")}).code == 0);
  CHECK(slurp(s.root / "a" / "checkpoint.msae") == slurp(s.root / "b" / "checkpoint.msae"));

  REQUIRE(quick_train(s.dir("half"), "toy-matryoshka", "100").code == 0);
  const auto r = run({"train", "-p", "toy-matryoshka", "--seed", "3", "--steps", "200", "-o",
                      s.dir("half"), "--set", "train.log_every=50", "--resume",
                      (s.root / "half" / "checkpoint.msae").string()});
  REQUIRE(r.code == 0);
  CHECK(slurp(s.root / "a" / "checkpoint.msae") == slurp(s.root / "half" / "checkpoint.msae"));
  CHECK(slurp(s.root / "a" / "log.jsonl") == slurp(s.root / "half" / "log.jsonl"));
}
