#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "microbia/harness.hpp"
#include "microbia/reports.hpp"

namespace py = pybind11;
using namespace microbia;

namespace {

using ArrayD = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ArrayF = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ArrayU = py::array_t<std::uint64_t, py::array::c_style | py::array::forcecast>;

LabelScheme parse_scheme(const std::string& s) {
  if (s == "seven") return LabelScheme::Seven;
  if (s == "four") return LabelScheme::Four;
  throw py::value_error("scheme must be 'seven' or 'four'");
}

MatrixD to_matrix(const ArrayD& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  MatrixD m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.data());
  return m;
}

py::array_t<double> from_matrix(const MatrixD& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), out.mutable_data());
  return out;
}

template <typename T, typename A>
BasicTensor<T> to_tensor(const A& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return BasicTensor<T>(shape, std::span<const T>(a.data(), static_cast<std::size_t>(a.size())));
}

template <typename T>
py::array_t<T> from_tensor(const BasicTensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

ConfusionMatrix to_confusion(const ArrayU& a) {
  if (a.ndim() != 2 || a.shape(0) != a.shape(1)) throw py::value_error("expected a square matrix");
  return ConfusionMatrix(a.shape(0), std::vector<std::uint64_t>(a.data(), a.data() + a.size()));
}

py::array_t<std::uint64_t> from_confusion(const ConfusionMatrix& m) {
  const auto n = static_cast<py::ssize_t>(m.classes());
  py::array_t<std::uint64_t> out({n, n});
  auto w = out.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < n; ++i)
    for (py::ssize_t j = 0; j < n; ++j) w(i, j) = m.at(i, j);
  return out;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["scheme"] = r.scheme == LabelScheme::Seven ? "seven" : "four";
  d["precision"] = r.precision;
  d["recall"] = r.recall;
  d["f1"] = r.f1;
  d["accuracy"] = r.accuracy;
  d["loss"] = r.loss;
  d["confusion"] = from_confusion(r.confusion);
  py::list per;
  for (const auto& m : r.per_class) {
    py::dict c;
    c["precision"] = m.precision;
    c["recall"] = m.recall;
    c["f1"] = m.f1;
    c["support"] = m.support;
    per.append(c);
  }
  d["per_class"] = per;
  return d;
}

py::dict summary_dict(const RunSummary& s) {
  py::dict d;
  d["kind"] = s.kind;
  py::list runs;
  for (const auto& r : s.runs) {
    py::dict x;
    x["seed"] = r.seed;
    x["valid"] = report_dict(r.valid);
    x["train"] = report_dict(r.train);
    x["train_class_f1_std"] = r.train_class_f1_std;
    x["best_epoch"] = r.log.best_epoch;
    runs.append(x);
  }
  d["runs"] = runs;
  const auto stats = [](const MetricStats& m) {
    return py::dict(py::arg("mean") = m.mean, py::arg("std") = m.std, py::arg("min") = m.min,
                    py::arg("max") = m.max);
  };
  d["precision"] = stats(s.precision);
  d["recall"] = stats(s.recall);
  d["f1"] = stats(s.f1);
  d["accuracy"] = stats(s.accuracy);
  d["representative_seed"] = s.runs.at(s.representative).seed;
  return d;
}

std::vector<ClassLabel> to_labels(const std::vector<int>& v) {
  std::vector<ClassLabel> out;
  for (int x : v) {
    if (x < 0 || x >= static_cast<int>(kSevenClasses)) throw py::value_error("label out of range");
    out.push_back(static_cast<ClassLabel>(x));
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Colony cardinality classification core";
  m.attr("__version__") = MICROBIA_VERSION;

  py::register_exception<Error>(m, "MicrobiaError", PyExc_RuntimeError);

  // Splits and balancing
  m.def("split_counts", [](std::size_t n) {
    const auto c = split_counts(n);
    return py::make_tuple(c.train, c.valid, c.test);
  }, "6:2:2 (train, valid, test) counts for one class of size n", py::arg("n"));
  m.def("stratified_split", [](const std::vector<int>& labels, std::uint64_t seed) {
    std::vector<std::string> out;
    for (Split s : stratified_split(to_labels(labels), seed)) out.emplace_back(split_name(s));
    return out;
  }, "Split name per label (labels are 0..6, 0 = outlier)", py::arg("labels"), py::arg("seed"));
  m.def("downsample_balanced", [](const std::vector<int>& labels, std::uint64_t seed) {
    return downsample_balanced(labels, seed);
  }, py::arg("labels"), py::arg("seed"));
  m.def("merge_labels", [](const std::vector<int>& labels) { return merge_labels(labels); },
        py::arg("labels"));

  // Metrics
  m.def("metrics", [](const ArrayU& confusion, const std::string& scheme) {
    return report_dict(metrics_from_confusion(to_confusion(confusion), parse_scheme(scheme)));
  }, "Per-class and support-weighted metrics of a confusion matrix (rows = truth)",
        py::arg("confusion"), py::arg("scheme") = "seven");
  m.def("convert_7_to_4", [](const ArrayU& confusion) {
    const auto r = metrics_from_confusion(to_confusion(confusion), LabelScheme::Seven);
    return report_dict(convert_report_7_to_4(r));
  }, "Re-score a seven-class confusion matrix under the four-class scheme",
        py::arg("confusion"));

  // Embeddings
  m.def("tsne_learning_rate", &tsne_learning_rate, py::arg("n"));
  m.def("pca", [](const ArrayD& x, std::size_t k) {
    const auto r = pca_embed(to_matrix(x), k);
    py::dict d;
    d["embedding"] = from_matrix(r.embedding.points);
    d["components"] = from_matrix(r.components);
    d["eigenvalues"] = std::vector<double>(r.eigenvalues.data(),
                                           r.eigenvalues.data() + r.eigenvalues.size());
    d["degenerate"] = r.degenerate;
    return d;
  }, py::arg("x"), py::arg("k") = 2);
  m.def("conditional_probabilities", [](const ArrayD& x, double perplexity) {
    const auto c = conditional_probabilities(to_matrix(x), perplexity);
    return py::make_tuple(from_matrix(c.p),
                          std::vector<double>(c.row_perplexity.data(),
                                              c.row_perplexity.data() + c.row_perplexity.size()));
  }, "Row-conditional P and the achieved per-row perplexity", py::arg("x"),
        py::arg("perplexity"));
  m.def("tsne", [](const ArrayD& x, double perplexity, std::size_t iterations, std::uint64_t seed) {
    TsneConfig c;
    c.perplexity = perplexity;
    c.iterations = iterations;
    c.seed = seed;
    TsneResult r;
    {
      py::gil_scoped_release release;
      r = tsne_embed(to_matrix(x), c);
    }
    py::list kl;
    for (const auto& p : r.kl_log) kl.append(py::make_tuple(p.iteration, p.kl));
    return py::make_tuple(from_matrix(r.embedding.points), kl);
  }, py::arg("x"), py::arg("perplexity") = 30.0, py::arg("iterations") = 5000,
        py::arg("seed") = 0);

  // CAM arithmetic
  m.def("cam_methods", [] {
    std::vector<std::string> out;
    for (CamMethod c : kAllCamMethods) out.emplace_back(cam_method_name(c));
    return out;
  });
  m.def("cam_from_maps", [](const ArrayD& a, const ArrayD& g, const std::string& method) {
    return from_tensor(cam_from_maps(to_tensor<double>(a), to_tensor<double>(g),
                                     parse_cam_method(method)));
  }, "Raw map from K x H x W activations and gradients", py::arg("activations"),
        py::arg("gradients"), py::arg("method"));

  // Data
  m.def("generate_dataset", [](const std::filesystem::path& dir, std::size_t per_class,
                               std::uint64_t seed) {
    SynthConfig c;
    c.class_counts.fill(per_class);
    c.seed = seed;
    return write_dataset(dir, generate_synthetic(c)).records.size();
  }, "Write a synthetic dataset; returns the record count", py::arg("dir"),
        py::arg("per_class") = 20, py::arg("seed") = 0);
  m.def("directory_hash", &directory_hash, py::arg("dir"));

  // Models
  py::class_<ModelState>(m, "Model")
      .def(py::init([](std::size_t outputs, std::uint64_t seed) {
             Rng rng(seed);
             return ModelState::initialize(Architecture::microbianet(outputs), rng);
           }),
           py::arg("outputs") = 7, py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return checkpoint_load(p).model; })
      .def("save", [](const ModelState& s, const std::filesystem::path& p) { checkpoint_save(p, s); })
      .def_property_readonly("outputs", &ModelState::num_outputs)
      .def_property_readonly("parameter_count", &ModelState::parameter_count)
      .def("forward", [](const ModelState& s, const ArrayF& images, const std::string& tap) {
        const Tensor x = to_tensor<float>(images);
        Tensor out;
        {
          py::gil_scoped_release release;
          const auto trace = forward_eval(s, x, parse_tap(tap));
          out = trace.tap(parse_tap(tap));
        }
        return from_tensor(out);
      }, "Eval-mode activations at a tap for an N x 3 x 128 x 128 batch", py::arg("images"),
           py::arg("tap") = "logits")
      .def("cam", [](const ModelState& s, const ArrayF& image, std::size_t class_index,
                     const std::string& method) {
        const auto r = cam(s, to_tensor<float>(image), class_index, parse_cam_method(method));
        return from_tensor(r.upsampled);
      }, "Normalised map upsampled to the input size", py::arg("image"), py::arg("class_index"),
           py::arg("method") = "gradcam");

  // Experiments
  m.def("run_config", [](const std::filesystem::path& path) -> py::object {
    const auto config = ExperimentConfig::load(path);
    switch (config.kind) {
      case ExperimentKind::Baseline: return summary_dict(run_baseline(config));
      case ExperimentKind::Balanced: return summary_dict(run_balanced(config));
      case ExperimentKind::Merged: {
        const auto c = run_merged(config);
        py::dict d;
        d["merged"] = report_dict(c.merged);
        d["converted_baseline"] =
            c.converted_baseline ? py::object(report_dict(*c.converted_baseline)) : py::none();
        d["delta_f1"] = c.delta_f1 ? py::object(py::float_(*c.delta_f1)) : py::none();
        return d;
      }
      case ExperimentKind::Explain: return py::cast(run_explain(config).string());
    }
    return py::none();
  }, "Run the experiment described by a config file", py::arg("path"));
}
