#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "vitprune/bench.hpp"
#include "vitprune/checkpoint.hpp"
#include "vitprune/config.hpp"
#include "vitprune/data.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/evaluate.hpp"
#include "vitprune/tome.hpp"
#include "vitprune/train.hpp"

namespace py = pybind11;
using namespace vitprune;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

std::vector<float> to_vec(const Array& a) { return std::vector<float>(a.data(), a.data() + a.size()); }

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["dice"] = r.dice;
  d["ap"] = r.ap;
  d["per_block"] = r.per_block;
  return d;
}

py::dict sample_dict(const Sample& s) {
  py::dict d;
  d["image"] = to_array(s.image);
  d["mask"] = to_array(s.mask);
  d["id"] = s.id;
  d["split"] = split_name(s.split);
  return d;
}

std::vector<Sample> samples_from(const RunConfig& c) {
  return generate(c.data_seed, c.num_samples, c.model.backbone.image_h, c.model.backbone.image_w);
}

InferenceSettings settings_for(const RunConfig& c, std::optional<std::string> mode, std::optional<double> ratio) {
  InferenceSettings s = InferenceSettings::from_config(c);
  if (mode) s.mode = parse_mode(*mode);
  if (ratio) (mode_merges(s.mode) ? s.merge_ratio : s.keep_ratio) = *ratio;
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Token pruning, routing and merging for ViT segmentation";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IndexError>(m, "IndexError", PyExc_IndexError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ValueError>(m, "VitpruneValueError", PyExc_ValueError);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("parse", &RunConfig::parse)
      .def_static("load", &RunConfig::load)
      .def("set", &RunConfig::set)
      .def("get", &RunConfig::get)
      .def("validate", &RunConfig::validate)
      .def("dump", &RunConfig::dump)
      .def("hash", [](const RunConfig& c) { return config_hash_hex(c); })
      .def("__eq__", &RunConfig::operator==)
      .def("__repr__", [](const RunConfig& c) { return "RunConfig(" + config_hash_hex(c) + ")"; });

  // tensor-level operations
  m.def("masked_softmax", [](const Array& logits, const Array& mask) {
    return to_array(ops::masked_softmax(to_tensor(logits), to_tensor(mask)));
  });
  m.def("top_k_indices", [](const Array& scores, std::size_t k) { return ops::top_k_indices(to_vec(scores), k); });
  m.def("policy_to_mask", [](const Array& p) { return to_array(policy_to_mask(to_tensor(p))); });
  m.def("keep_count", &keep_count);
  m.def(
      "stage_keep_counts",
      [](std::size_t n, double ratio, std::size_t depth, std::size_t first_block, std::size_t stage_len) {
        return PruneSchedule::hierarchical(depth, ratio, first_block, stage_len).stage_keep_counts(n);
      },
      py::arg("n"), py::arg("ratio"), py::arg("depth") = 12, py::arg("first_block") = 3, py::arg("stage_len") = 3);
  m.def(
      "gumbel_st",
      [](const Array& logits, float temperature, const Array& keep_noise, const Array& drop_noise) {
        const PolicyOutput p = gumbel_st(to_tensor(logits), temperature, to_vec(keep_noise), to_vec(drop_noise));
        return py::make_tuple(to_array(p.hard), to_array(p.soft));
      },
      py::arg("logits"), py::arg("temperature"), py::arg("keep_noise"), py::arg("drop_noise"));
  m.def(
      "ratio_loss",
      [](const std::vector<std::vector<Array>>& policies, double ratio, std::size_t depth, std::size_t first_block,
         std::size_t stage_len) {
        std::vector<std::vector<Tensor>> t;
        for (const auto& item : policies) {
          t.emplace_back();
          for (const auto& p : item) t.back().push_back(to_tensor(p));
        }
        return ratio_loss(t, PruneSchedule::hierarchical(depth, ratio, first_block, stage_len)).item();
      },
      py::arg("policies"), py::arg("ratio"), py::arg("depth") = 12, py::arg("first_block") = 3,
      py::arg("stage_len") = 3);
  m.def("make_target", [](const Array& mask, std::size_t gh, std::size_t gw) {
    return to_array(make_target(to_tensor(mask), gh, gw));
  });
  m.def("average_precision", [](const Array& s, const Array& g) { return average_precision(to_vec(s), to_vec(g)); });
  m.def("dice", [](const Array& p, const Array& g) { return dice(to_vec(p), to_vec(g)); });
  m.def(
      "bipartite_soft_match",
      [](const Array& keys, std::size_t r) {
        const MergeMap map = bipartite_soft_match(to_tensor(keys), r);
        py::dict d;
        d["pairs"] = map.pairs;
        d["groups"] = map.groups;
        d["sizes"] = map.sizes;
        return d;
      },
      py::arg("keys"), py::arg("r"));
  m.def("merge_tokens", [](const Array& tokens, const Array& keys, std::size_t r) {
    const MergeMap map = bipartite_soft_match(to_tensor(keys), r);
    return to_array(merge(to_tensor(tokens), map));
  });
  m.def(
      "sample_route",
      [](std::size_t depth, std::size_t tokens, double fraction, const std::string& mode, std::uint64_t seed) {
        Rng rng(seed);
        const RouteSpec r =
            sample_route(depth, tokens, fraction, mode == "fixed" ? RouteMode::Fixed : RouteMode::Random, rng);
        py::dict d;
        d["l"] = r.l;
        d["n"] = r.n;
        d["kept"] = r.kept;
        d["routed"] = r.routed;
        return d;
      },
      py::arg("depth"), py::arg("tokens"), py::arg("route_fraction"), py::arg("mode") = "random", py::arg("seed") = 0);

  // data
  m.def(
      "generate_sample",
      [](std::uint64_t seed, std::size_t index, std::size_t h, std::size_t w) {
        return sample_dict(generate_sample(seed, index, h, w));
      },
      py::arg("seed"), py::arg("index"), py::arg("height") = 64, py::arg("width") = 64);
  m.def("generate_dataset", [](const RunConfig& c) {
    py::list out;
    for (const Sample& s : samples_from(c)) out.append(sample_dict(s));
    return out;
  });
  m.def("normalize", [](const Array& image) { return to_array(normalize(to_tensor(image))); });

  // models
  py::class_<Model>(m, "Model")
      .def_static(
          "init",
          [](const RunConfig& c, std::uint64_t seed) {
            Rng rng(seed, 0);
            return Model::init(c.model, rng);
          },
          py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("taps", [](const Model& m) { return m.taps; })
      .def("num_parameters",
           [](const Model& m) {
             std::size_t n = 0;
             for (const auto& p : m.parameters()) n += p.tensor.numel();
             return n;
           })
      .def(
          "predict",
          [](const Model& model, const RunConfig& c, const Array& image, std::optional<std::string> mode,
             std::optional<double> ratio) {
            const ForwardOutput out = infer(model, normalize(to_tensor(image)), settings_for(c, mode, ratio));
            py::list logits;
            for (const Tensor& t : tap_logits(model, out)) logits.append(to_array(t));
            py::dict d;
            d["logits"] = logits;
            d["active_counts"] = out.active_counts;
            return d;
          },
          py::arg("config"), py::arg("image"), py::arg("mode") = py::none(), py::arg("ratio") = py::none());

  m.def(
      "train",
      [](const RunConfig& c, std::size_t max_steps, std::optional<std::filesystem::path> out_dir) {
        TrainOptions opt;
        opt.max_steps = max_steps;
        opt.out_dir = out_dir;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(c, samples_from(c), opt);
        }
        py::dict d;
        d["model"] = r.model;
        d["steps"] = r.steps;
        d["metrics"] = r.metrics;
        d["test"] = r.test ? py::object(report_dict(*r.test)) : py::none();
        return d;
      },
      py::arg("config"), py::arg("max_steps") = 0, py::arg("out_dir") = py::none());
  m.def(
      "evaluate",
      [](const Model& model, const RunConfig& c, const std::string& split, std::optional<std::string> mode,
         std::optional<double> ratio) {
        const auto data = samples_from(c);
        return report_dict(evaluate(model, select_split(data, parse_split(split)), settings_for(c, mode, ratio)));
      },
      py::arg("model"), py::arg("config"), py::arg("split") = "test", py::arg("mode") = py::none(),
      py::arg("ratio") = py::none());
  m.def(
      "similarity_matrix",
      [](const Model& model, const RunConfig& c, const std::string& split) {
        const auto data = samples_from(c);
        return similarity_matrix(model, select_split(data, parse_split(split)), InferenceSettings::from_config(c));
      },
      py::arg("model"), py::arg("config"), py::arg("split") = "test");
  m.def(
      "policy_frequency",
      [](const Model& model, const RunConfig& c, const Array& image) {
        const PolicyFrequency pf = policy_frequency(model, normalize(to_tensor(image)), c.schedule());
        const auto f = pf.frequencies();
        Array a({static_cast<py::ssize_t>(pf.grid_h), static_cast<py::ssize_t>(pf.grid_w)});
        std::copy(f.begin(), f.end(), a.mutable_data());
        return a;
      },
      py::arg("model"), py::arg("config"), py::arg("image"));
  m.def(
      "bench",
      [](const Model& model, const RunConfig& c, std::optional<std::string> mode, std::optional<double> ratio,
         std::size_t warmup, std::size_t iters) {
        BenchResult r;
        {
          py::gil_scoped_release release;
          r = bench_throughput(model, settings_for(c, mode, ratio), warmup, iters);
        }
        r.config_hash = config_hash_hex(c);
        return py::module_::import("json").attr("loads")(r.to_json());
      },
      py::arg("model"), py::arg("config"), py::arg("mode") = py::none(), py::arg("ratio") = py::none(),
      py::arg("warmup") = 20, py::arg("iters") = 200);
  m.def(
      "save_checkpoint",
      [](const std::filesystem::path& dir, const Model& model, const RunConfig& c) { save_checkpoint(dir, model, c); });
  m.def("load_checkpoint", [](const std::filesystem::path& dir) {
    Checkpoint ck = load_checkpoint(dir);
    return py::make_tuple(std::move(ck.model), std::move(ck.config));
  });
}
