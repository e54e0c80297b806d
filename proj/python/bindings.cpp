#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <string>
#include <vector>

#include "msae/analysis.hpp"
#include "msae/error.hpp"
#include "msae/linalg.hpp"
#include "msae/loss.hpp"
#include "msae/sae.hpp"
#include "msae/tensor_io.hpp"
#include "msae/toy_data.hpp"
#include "msae/trainer.hpp"
#include "msae/treeview.hpp"

namespace py = pybind11;
using namespace msae;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() == 1) {
    return Matrix(1, a.shape(0), std::vector<double>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() != 2) throw ShapeError("expected a 1-D or 2-D array");
  return Matrix(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

FeatureTree tree_of(const py::object& o) { return tree_from_json(from_py(o)); }

ActivationCfg activation_of(const py::object& o) {
  return o.is_none() ? ActivationCfg{} : activation_from_json(from_py(o));
}

}  // namespace

PYBIND11_MODULE(_msae, m) {
  m.doc() = "Matryoshka sparse autoencoder core";

  py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<RangeError>(m, "RangeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<SaeParams>(m, "SaeParams")
      .def(py::init([](const Array& w_enc, const Array& b_enc, const Array& w_dec, const Array& b_dec,
                       bool pre_encoder_bias) {
             SaeParams p{to_matrix(w_enc), to_matrix(b_enc), to_matrix(w_dec), to_matrix(b_dec),
                         pre_encoder_bias};
             p.validate();
             return p;
           }),
           py::arg("w_enc"), py::arg("b_enc"), py::arg("w_dec"), py::arg("b_dec"),
           py::arg("pre_encoder_bias") = true)
      .def_property_readonly("w_enc", [](const SaeParams& p) { return to_array(p.w_enc); })
      .def_property_readonly("b_enc", [](const SaeParams& p) { return to_array(p.b_enc); })
      .def_property_readonly("w_dec", [](const SaeParams& p) { return to_array(p.w_dec); })
      .def_property_readonly("b_dec", [](const SaeParams& p) { return to_array(p.b_dec); })
      .def_readwrite("pre_encoder_bias", &SaeParams::pre_encoder_bias)
      .def_property_readonly("dict_size", &SaeParams::dict_size)
      .def_property_readonly("input_dim", &SaeParams::input_dim);

  m.def(
      "init_params",
      [](std::size_t dict_size, std::size_t input_dim, std::uint64_t seed) {
        Rng rng(seed);
        return init_params(dict_size, input_dim, rng);
      },
      py::arg("dict_size"), py::arg("input_dim"), py::arg("seed") = 0);

  m.def(
      "default_tree",
      [](std::uint64_t seed, std::size_t num_parents, std::size_t children_per_parent, std::size_t dim) {
        DefaultTreeOptions opts;
        opts.num_parents = num_parents;
        opts.children_per_parent = children_per_parent;
        opts.dim = dim;
        Rng rng(seed);
        return to_py(tree_to_json(build_default_tree(rng, opts)));
      },
      py::arg("seed") = 0, py::arg("num_parents") = 4, py::arg("children_per_parent") = 4,
      py::arg("dim") = 20);

  m.def("expected_l0", [](const py::object& tree) { return expected_l0(tree_of(tree)); });

  m.def(
      "sample_batch",
      [](const py::object& tree, std::size_t batch, std::uint64_t seed) {
        const FeatureTree t = tree_of(tree);
        Rng rng(seed);
        const ToyBatch b = sample_batch(t, batch, rng);
        py::array_t<std::uint8_t> active({batch, b.num_features});
        std::copy(b.active.begin(), b.active.end(), active.mutable_data());
        return py::make_tuple(to_array(b.x), active);
      },
      py::arg("tree"), py::arg("batch"), py::arg("seed") = 0);

  m.def(
      "encode",
      [](const SaeParams& p, const Array& x, const py::object& activation, bool inference) {
        return to_array(encode(p, activation_of(activation), to_matrix(x),
                               inference ? EncodeMode::kInference : EncodeMode::kTrain));
      },
      py::arg("params"), py::arg("x"), py::arg("activation") = py::none(), py::arg("inference") = false);

  m.def(
      "decode_prefix",
      [](const SaeParams& p, const Array& acts, std::size_t prefix) {
        return to_array(decode_prefix(p, to_matrix(acts), prefix));
      },
      py::arg("params"), py::arg("acts"), py::arg("prefix"));

  m.def(
      "batch_topk",
      [](const Array& relu_pre, std::size_t keep) { return to_array(batch_topk(to_matrix(relu_pre), keep)); },
      py::arg("relu_pre"), py::arg("keep_count"));

  m.def(
      "loss",
      [](const SaeParams& p, const Array& x, const std::vector<std::size_t>& prefixes,
         const py::object& loss_cfg, const py::object& activation) {
        const LossCfg lcfg = loss_cfg.is_none() ? LossCfg{} : loss_cfg_from_json(from_py(loss_cfg));
        const ActivationCfg act = activation_of(activation);
        const Matrix xm = to_matrix(x);
        const ForwardPass fwd = forward_loss(p, act, lcfg, prefixes, xm);
        const SaeGrads g = backward(p, act, lcfg, prefixes, xm, fwd);
        py::dict grads;
        for (std::size_t b = 0; b < 4; ++b) grads[block_name(static_cast<ParamBlock>(b))] = to_array(g.blocks[b]);
        return py::make_tuple(to_py(to_json(fwd.breakdown)), grads);
      },
      py::arg("params"), py::arg("x"), py::arg("prefixes"), py::arg("loss_cfg") = py::none(),
      py::arg("activation") = py::none());

  m.def("preset_config", [](const std::string& name) {
    if (name == "toy-matryoshka") return to_py(to_json(toy_matryoshka_config()));
    if (name == "toy-vanilla") return to_py(to_json(toy_vanilla_config()));
    if (name == "gemma-shape-65k") return to_py(to_json(gemma_shape_65k_config()));
    throw ConfigError("unknown preset '" + name + "'");
  });

  m.def(
      "train",
      [](const py::object& tree, const py::object& config) {
        const FeatureTree t = tree_of(tree);
        const TrainConfig cfg = train_config_from_json(from_py(config));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(t, cfg);
        }
        return py::make_tuple(r.state.params, to_py(nlohmann::json(r.log)));
      },
      py::arg("tree"), py::arg("config"));

  m.def(
      "analyze",
      [](const SaeParams& p, const py::object& tree, const py::object& activation,
         std::size_t eval_samples, bool run_meta, std::uint64_t seed) {
        AnalysisOptions opts;
        opts.eval_samples = eval_samples;
        opts.run_meta = run_meta;
        opts.seed = seed;
        return to_py(to_json(analyze(p, activation_of(activation), tree_of(tree), opts)));
      },
      py::arg("params"), py::arg("tree"), py::arg("activation") = py::none(),
      py::arg("eval_samples") = 10000, py::arg("run_meta") = true, py::arg("seed") = 0);

  m.def("ground_truth_params", [](const py::object& tree) { return ground_truth_params(tree_of(tree)); });

  m.def("hungarian_match", [](const Array& cost) { return hungarian_match(to_matrix(cost)); });

  m.def(
      "directed_mcs",
      [](const std::vector<double>& a, const std::vector<double>& b, double fire_eps) {
        if (a.size() != b.size()) throw ShapeError("directed_mcs: length mismatch");
        return directed_mcs(a, b, fire_eps);
      },
      py::arg("a"), py::arg("b"), py::arg("fire_eps") = 1e-6);

  m.def(
      "build_tree",
      [](const std::vector<Array>& acts, double threshold) {
        std::vector<Matrix> mats;
        for (const auto& a : acts) mats.push_back(to_matrix(a));
        return to_py(to_json(build_tree_from_acts(mats, threshold)));
      },
      py::arg("acts"), py::arg("threshold") = 0.6);

  m.def(
      "save_checkpoint",
      [](const std::string& path, const SaeParams& p, const py::object& activation) {
        ModelCheckpoint ckpt;
        ckpt.params = p;
        ckpt.activation = activation_of(activation);
        save_checkpoint(path, ckpt);
      },
      py::arg("path"), py::arg("params"), py::arg("activation") = py::none());

  m.def("load_checkpoint", [](const std::string& path) {
    const ModelCheckpoint ckpt = load_checkpoint(path);
    return py::make_tuple(ckpt.params, to_py(to_json(ckpt.activation)));
  });
}
