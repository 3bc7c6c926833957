#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mdenet/checkpoint.hpp"
#include "mdenet/errors.hpp"
#include "mdenet/numeric_encoder.hpp"
#include "mdenet/train.hpp"

namespace py = pybind11;
using namespace mdenet;
using nlohmann::json;

namespace {

// Dicts cross the boundary as JSON text; the Python wrapper does the
// (de)serialization.
TrainConfig config_from_text(const std::string& text) {
  try {
    return train_config_from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
}

std::string history_text(const TrainHistory& h) {
  json steps = json::array(), epochs = json::array();
  for (const auto& s : h.steps)
    steps.push_back({{"epoch", s.epoch}, {"step", s.step}, {"cls", s.cls}, {"disc", s.disc}, {"excl", s.excl},
                     {"total", s.total}, {"rho", s.rho}, {"sub_norm", s.sub_norm}});
  for (const auto& e : h.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_total", e.mean_total},
                      {"cls_acc", e.cls_acc ? json(*e.cls_acc) : json(nullptr)},
                      {"det_acc", e.det_acc ? json(*e.det_acc) : json(nullptr)}});
  return json{{"steps", steps}, {"epochs", epochs}}.dump();
}

}  // namespace

PYBIND11_MODULE(_mdenet, m) {
  m.doc() = "MDENet open-set malware recognition core";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<SplitError>(m, "SplitError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());
  py::register_exception<TripletError>(m, "TripletError", base.ptr());

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("family_names", &Dataset::family_names)
      .def("__len__", [](const Dataset& d) { return d.records.size(); })
      .def_property_readonly("feature_count", &Dataset::feature_count)
      .def_property_readonly("has_tokens", &Dataset::has_tokens)
      .def("labels", [](const Dataset& d) {
        std::vector<int> out;
        for (const auto& r : d.records) out.push_back(r.family.id);
        return out;
      });

  py::class_<DatasetSplit>(m, "DatasetSplit")
      .def_readonly("family_names", &DatasetSplit::family_names)
      .def_readonly("known_families", &DatasetSplit::known_families)
      .def_readonly("train_index", &DatasetSplit::train_index)
      .def_readonly("test_known_index", &DatasetSplit::test_known_index)
      .def_readonly("test_unknown_index", &DatasetSplit::test_unknown_index)
      .def("manifest", [](const DatasetSplit& s) { return split_manifest(s).dump(); });

  py::class_<TrainedModel>(m, "TrainedModel")
      .def_readonly("family_names", &TrainedModel::family_names)
      .def_property_readonly("config_json", [](const TrainedModel& t) { return to_json(t.config).dump(); })
      .def_property_readonly("has_textual_encoder", [](const TrainedModel& t) { return t.model.textual.has_value(); })
      .def_property_readonly("has_tables", [](const TrainedModel& t) { return t.centroids.has_value(); })
      .def("parameter_count", [](TrainedModel& t) { return t.model.registry().parameter_count(); });

  m.def("load_jsonl", [](const std::string& path) { return load_jsonl(path); }, py::arg("path"));
  m.def("write_jsonl", [](const Dataset& d, const std::string& path) { write_jsonl(d, path); }, py::arg("dataset"),
        py::arg("path"));
  m.def(
      "gen_synthetic",
      [](const std::string& spec, std::uint64_t seed) {
        return gen_synthetic(synthetic_spec_from_json(json::parse(spec)), seed);
      },
      py::arg("spec_json"), py::arg("seed"));
  m.def("split_known_unknown", &split_known_unknown, py::arg("dataset"), py::arg("known_families"),
        py::arg("train_fraction"), py::arg("seed"));

  m.def("normalize_config", [](const std::string& text) { return to_json(config_from_text(text)).dump(); });
  m.def("config_hash", [](const std::string& text) { return config_hash(config_from_text(text)); });

  m.def(
      "train",
      [](const std::string& config, const DatasetSplit& split) {
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(config_from_text(config), split);
        }
        return py::make_tuple(std::move(r.trained), history_text(r.history));
      },
      py::arg("config_json"), py::arg("split"));
  m.def(
      "evaluate",
      [](TrainedModel& t, const DatasetSplit& split) {
        std::string metrics, confusion;
        {
          py::gil_scoped_release release;
          auto rep = evaluate(t, split);
          metrics = rep.metrics_json().dump();
          confusion = rep.confusion_csv();
        }
        return py::make_tuple(metrics, confusion);
      },
      py::arg("model"), py::arg("split"));
  m.def(
      "detect",
      [](TrainedModel& t, const Dataset& d) {
        if (!t.centroids || !t.thresholds) throw InputError("model has no fitted tables; call evaluate first");
        auto set = t.featurizer.prepare(d.records);
        auto inf = infer(t.model, set);
        std::vector<py::dict> out;
        for (std::size_t i = 0; i < set.size(); ++i) {
          auto v = detect(inf.z[i], inf.probs[i], *t.centroids, *t.thresholds);
          py::dict row;
          row["known"] = v.known;
          row["family"] = v.family;
          row["tentative_family"] = v.tentative_family;
          row["distance"] = v.distance;
          out.push_back(row);
        }
        return out;
      },
      py::arg("model"), py::arg("dataset"));
  m.def(
      "grid_search",
      [](const std::string& config, const DatasetSplit& split, std::size_t epochs_per_cell) {
        std::string csv, panels;
        {
          py::gil_scoped_release release;
          auto g = grid_search(config_from_text(config), split, epochs_per_cell);
          csv = g.csv();
          panels = g.panels().dump();
        }
        return py::make_tuple(csv, panels);
      },
      py::arg("config_json"), py::arg("split"), py::arg("epochs_per_cell"));
  m.def(
      "ablate",
      [](const std::string& config, const DatasetSplit& split) {
        py::gil_scoped_release release;
        return ablation_csv(ablate(config_from_text(config), split));
      },
      py::arg("config_json"), py::arg("split"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("model"), py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("admissible_weight_pairs", &admissible_weight_pairs);

  m.def(
      "det_accuracy",
      [](const std::vector<bool>& on_known, const std::vector<bool>& on_unknown) {
        auto r = det_accuracy(on_known, on_unknown);
        return py::make_tuple(r.tpr, r.tnr, r.det_acc);
      },
      py::arg("known_verdicts_on_known"), py::arg("known_verdicts_on_unknown"));
  m.def(
      "cls_accuracy",
      [](const std::vector<int>& pred, const std::vector<int>& truth) { return cls_accuracy(pred, truth); },
      py::arg("predictions"), py::arg("labels"));
  m.def(
      "gaussian_similarity",
      [](const std::vector<double>& a, const std::vector<double>& b) { return gaussian_similarity(a, b); },
      py::arg("a"), py::arg("b"));
}
