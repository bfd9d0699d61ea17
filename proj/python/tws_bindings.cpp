#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tws/accounting.hpp"
#include "tws/adaptive.hpp"
#include "tws/experiment.hpp"
#include "tws/pipeline.hpp"
#include "tws/splitting.hpp"

namespace py = pybind11;
using namespace tws;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0));
  const auto c = static_cast<std::size_t>(a.shape(1));
  return Tensor({r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Tensor& t) {
  Array out({t.shape()[0], t.size() / t.shape()[0]});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Granularity granularity(bool per_row) { return per_row ? Granularity::kPerRow : Granularity::kPerMatrix; }

ExperimentConfig config_from(const std::string& text) {
  if (text.empty()) return ExperimentConfig::desk();
  return experiment_from_json(nlohmann::json::parse(text));
}

py::dict examples(const std::vector<Example>& ex) {
  std::vector<std::vector<int>> tokens;
  std::vector<int> labels;
  for (const auto& e : ex) {
    tokens.push_back(e.tokens);
    labels.push_back(e.label);
  }
  py::dict d;
  d["tokens"] = tokens;
  d["labels"] = labels;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tws, m) {
  m.doc() = "Ternary weight splitting: quantizers, splitting, accounting and the desk-scale pipeline.";

  py::register_exception<DegenerateTernary>(m, "DegenerateTernary", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "ternarize",
      [](const Array& w, bool per_row) {
        const TernaryResult t = ternarize(to_tensor(w), granularity(per_row));
        py::dict d;
        d["w_hat"] = to_array(t.w_hat);
        d["alpha"] = t.alpha;
        d["delta"] = t.delta;
        return d;
      },
      py::arg("w"), py::arg("per_row") = false);

  m.def(
      "binarize",
      [](const Array& w, bool per_row) {
        const BinaryResult b = binarize(to_tensor(w), granularity(per_row));
        py::dict d;
        d["w_hat"] = to_array(b.w_hat);
        d["alpha"] = b.alpha;
        return d;
      },
      py::arg("w"), py::arg("per_row") = false);

  m.def(
      "split",
      [](const Array& w, bool per_row) {
        const SplitResult s = tws_split(to_tensor(w), granularity(per_row));
        py::dict d;
        d["w1"] = to_array(s.w1);
        d["w2"] = to_array(s.w2);
        d["a"] = s.a;
        d["b"] = s.b;
        d["alpha1"] = s.alpha1;
        d["alpha2"] = s.alpha2;
        d["latent_error"] = s.latent_error;
        d["quantized_error"] = s.quantized_error;
        return d;
      },
      py::arg("w"), py::arg("per_row") = false,
      "Splits a latent matrix into two halves whose binarizations sum to its ternarization.");

  m.def(
      "knapsack",
      [](const std::vector<double>& u, const std::vector<std::int64_t>& c, std::int64_t capacity) {
        const KnapsackResult k = knapsack_select(u, c, capacity);
        py::dict d;
        d["s"] = k.s;
        d["value"] = k.value;
        d["cost"] = k.cost;
        return d;
      },
      py::arg("u"), py::arg("c"), py::arg("capacity"));

  m.def(
      "account",
      [](const std::string& weights, double width, int act_bits, bool split, int seq) {
        CostInput in;
        in.spec = ModelSpec::bert_base();
        in.spec.width = width;
        in.act_bits = act_bits;
        if (weights == "fp") {
          in.precision = uniform_precision(in.spec, QuantScheme::full());
        } else if (weights == "ternary") {
          in.precision = ternary_precision(in.spec);
        } else if (weights == "binary") {
          in.precision = binary_precision(in.spec);
        } else {
          throw std::invalid_argument("weights must be fp, ternary or binary");
        }
        if (split) {
          for (const auto& k : splittable_matrices(in.spec)) in.split.insert(k);
        }
        py::dict d;
        d["bytes"] = model_size_bytes(in);
        d["flops"] = model_flops(in, seq);
        return d;
      },
      py::arg("weights") = "fp", py::arg("width") = 1.0, py::arg("act_bits") = 32, py::arg("split") = false,
      py::arg("seq") = 128, "Size in bytes and FLOPs of BERT-base at the given precision.");

  m.def("desk_config", [] { return to_json(ExperimentConfig::desk()).dump(); });
  m.def("config_hash", [](const std::string& text) { return config_hash(config_from(text)); },
        py::arg("config_json") = "");

  m.def(
      "synth_task",
      [](const std::string& kind, std::uint64_t seed, int vocab, int seq, std::size_t train, std::size_t dev) {
        const Task t = synth_task(task_kind_from_string(kind), seed,
                                  SynthOptions{vocab, seq, train, dev});
        py::dict d;
        d["train"] = examples(t.train);
        d["dev"] = examples(t.dev);
        d["classes"] = t.classes;
        d["seq"] = t.seq;
        return d;
      },
      py::arg("kind"), py::arg("seed") = 0, py::arg("vocab") = 64, py::arg("seq") = 16, py::arg("train") = 4000,
      py::arg("dev") = 1000);

  m.def(
      "run_pipeline",
      [](const std::string& text, std::uint64_t seed) {
        const ExperimentConfig c = config_from(text);
        c.validate();
        std::map<std::string, double> metrics;
        {
          py::gil_scoped_release release;
          const Task task = make_task(c);
          const Model teacher = make_teacher(task, c);
          const auto backbone = make_backbone(task, teacher, c);
          PipelineConfig pc = c.pipeline;
          pc.seed = seed;
          metrics = run_tws_pipeline(task, teacher, pc, backbone.get()).metrics;
          metrics["teacher_acc"] = accuracy(teacher, task.dev, task.seq);
        }
        return metrics;
      },
      py::arg("config_json") = "", py::arg("seed") = 0,
      "Trains the teacher, runs the three-stage pipeline for one seed and returns its metrics.");

  m.attr("__version__") = kVersion;
}
