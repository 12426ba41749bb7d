// Python bindings. Configs and reports cross the boundary as JSON text.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cilfuse/errors.hpp"
#include "cilfuse/eval.hpp"
#include "cilfuse/experiment.hpp"
#include "cilfuse/io.hpp"

namespace py = pybind11;
using namespace cilfuse;
using nlohmann::json;

namespace {

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = text.empty() ? json::object() : json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = config_from_json(j);
  c.validate();
  return c;
}

py::array_t<double> to_array(const Mat& m) {
  py::array_t<double> out({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

Mat from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  Mat m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

py::dict artifacts_dict(const RunArtifacts& art) {
  py::dict d;
  d["report"] = art.report;
  d["csv"] = art.csv;
  d["plots"] = art.plots;
  d["checkpoints"] = art.checkpoints;
  d["error_manifest"] = art.error_manifest;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cilfuse core: class-incremental learning with feature augmentation and score fusion";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ReportError>(m, "ReportError", base.ptr());
  py::register_exception<SpecError>(m, "SpecError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());

  m.attr("methods") = kMethods;

  m.def("default_config", [] { return config_to_json(ExperimentConfig{}).dump(); },
        "Default experiment config as JSON text.");
  m.def("normalize_config", [](const std::string& text) { return config_to_json(parse_config(text)).dump(); },
        py::arg("config"), "Validate a config and return it with every default filled in.");
  m.def("make_scenario",
        [](const std::string& config, std::uint64_t seed) { return scenario_to_json(make_scenario(parse_config(config), seed)).dump(); },
        py::arg("config"), py::arg("seed") = 0, "Scenario JSON for one run seed.");
  m.def(
      "run",
      [](const std::string& config, std::size_t threads) {
        const ExperimentConfig c = parse_config(config);
        std::vector<SeedRun> runs;
        {
          py::gil_scoped_release release;
          runs = run_experiment(c, RunOptions{.threads = threads});
        }
        return build_report(c, runs).dump();
      },
      py::arg("config"), py::arg("threads") = 1, "Run every seed in memory and return report JSON text.");
  m.def(
      "run_to_directory",
      [](const std::string& config, std::size_t threads) {
        const ExperimentConfig c = parse_config(config);
        RunArtifacts art;
        {
          py::gil_scoped_release release;
          art = run_to_directory(c, threads);
        }
        return artifacts_dict(art);
      },
      py::arg("config"), py::arg("threads") = 1, "Run and write report.json, metrics.csv, plots and checkpoints.");
  m.def("render_report", [](const std::filesystem::path& dir) { return artifacts_dict(render_report(dir)); },
        py::arg("dir"));

  m.def("average_accuracy", &average_accuracy, py::arg("base"), py::arg("novel") = std::nullopt,
        py::arg("overlap") = std::nullopt);
  m.def("round4", &round4);
  m.def("spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); });

  m.def(
      "write_feature_file",
      [](const std::filesystem::path& path, const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
         const std::vector<std::uint32_t>& labels) { write_feature_file(path, from_array(x), labels); },
      py::arg("path"), py::arg("x"), py::arg("labels"));
  m.def(
      "read_feature_file",
      [](const std::filesystem::path& path) {
        const FeatureData d = read_feature_file(path);
        return py::make_tuple(to_array(d.x), d.labels);
      },
      py::arg("path"), "Returns (features, labels).");
  m.def(
      "ingest_features",
      [](const std::filesystem::path& file, const std::filesystem::path& manifest) {
        const LabeledSet s = ingest_features(file, manifest);
        py::dict d;
        d["x"] = to_array(s.x);
        d["y"] = s.y;
        d["origin"] = s.origin;
        return d;
      },
      py::arg("file"), py::arg("manifest"));
  m.def(
      "checkpoint_info",
      [](const std::filesystem::path& path) {
        const Checkpoint ck = load_checkpoint(path);
        py::dict d;
        py::list branches;
        for (const auto& b : ck.model.branches) branches.append(b.labels);
        d["branches"] = branches;
        d["parameter_hash"] = hash_params(ck.model.params());
        d["has_fusion"] = ck.fusion.has_value();
        if (ck.fusion) {
          d["alpha"] = ck.fusion->alpha;
          d["beta"] = ck.fusion->beta;
          d["pooler"] = to_string(ck.fusion->pooler);
          d["cross_weights"] = ck.fusion->cross.size();
        }
        return d;
      },
      py::arg("path"), "Branch labels and fusion settings of a checkpoint.");
}
