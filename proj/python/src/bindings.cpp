#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cropdoc/capsnet.hpp"
#include "cropdoc/checkpoint.hpp"
#include "cropdoc/errors.hpp"
#include "cropdoc/evaluation.hpp"
#include "cropdoc/hsi.hpp"
#include "cropdoc/synthetic.hpp"
#include "cropdoc/training.hpp"

namespace py = pybind11;
using namespace cropdoc;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

HsiCube cube_from_array(const F32Array& values, std::vector<double> wavelengths) {
  if (values.ndim() != 3) throw DimensionError("cube array must be [H, W, B]");
  const auto h = static_cast<std::size_t>(values.shape(0));
  const auto w = static_cast<std::size_t>(values.shape(1));
  const auto b = static_cast<std::size_t>(values.shape(2));
  if (wavelengths.size() != b) throw DimensionError("need one wavelength per band");
  return HsiCube(h, w, std::move(wavelengths), std::vector<float>(values.data(), values.data() + values.size()));
}

py::array_t<float> cube_to_array(const HsiCube& cube) {
  py::array_t<float> out({cube.height(), cube.width(), cube.bands()});
  std::copy(cube.reflectance().begin(), cube.reflectance().end(), out.mutable_data());
  return out;
}

LabelMap labels_from_array(const U8Array& ids) {
  if (ids.ndim() != 2) throw DimensionError("label array must be [H, W]");
  return LabelMap(static_cast<std::size_t>(ids.shape(0)), static_cast<std::size_t>(ids.shape(1)),
                  std::vector<std::uint8_t>(ids.data(), ids.data() + ids.size()));
}

py::array_t<std::uint8_t> labels_to_array(const LabelMap& map) {
  py::array_t<std::uint8_t> out({map.height(), map.width()});
  std::copy(map.ids().begin(), map.ids().end(), out.mutable_data());
  return out;
}

Tensor tensor_from_array(const F64Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::object optional_value(const std::optional<double>& v) { return v ? py::cast(*v) : py::none(); }

py::dict report_dict(const TrainReport& r) {
  py::list epochs;
  for (const EpochRecord& e : r.epochs) {
    py::dict d;
    d["epoch"] = e.epoch;
    d["train_loss"] = e.train_loss;
    d["val_oa"] = e.val_oa;
    d["lr"] = e.lr;
    d["seconds"] = e.seconds;
    epochs.append(d);
  }
  py::dict out;
  out["epochs"] = epochs;
  out["best_epoch"] = r.best_epoch;
  out["best_val_oa"] = r.best_val_oa;
  out["stopped_early"] = r.stopped_early;
  return out;
}

}  // namespace

PYBIND11_MODULE(_cropdoc, m) {
  m.doc() = "Capsule-network crop disease mapping on hyperspectral scenes";

  auto base = py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_readwrite("bands", &NetworkConfig::bands)
      .def_readwrite("spectral_kernels", &NetworkConfig::spectral_kernels)
      .def_readwrite("spatial_kernels", &NetworkConfig::spatial_kernels)
      .def_readwrite("capsules", &NetworkConfig::capsules)
      .def_readwrite("capsule_dim", &NetworkConfig::capsule_dim)
      .def_readwrite("class_dim", &NetworkConfig::class_dim)
      .def_readwrite("n_class", &NetworkConfig::n_class)
      .def_readwrite("patch", &NetworkConfig::patch)
      .def_readwrite("kernel", &NetworkConfig::kernel)
      .def_readwrite("receptive_field", &NetworkConfig::receptive_field)
      .def_readwrite("routing_iters", &NetworkConfig::routing_iters)
      .def_readwrite("decoder_hidden", &NetworkConfig::decoder_hidden)
      .def("validate", &NetworkConfig::validate)
      .def("__eq__", [](const NetworkConfig& a, const NetworkConfig& b) { return a == b; });

  py::class_<LossConfig>(m, "LossConfig")
      .def(py::init<>())
      .def_readwrite("edge_plus", &LossConfig::edge_plus)
      .def_readwrite("edge_minus", &LossConfig::edge_minus)
      .def_readwrite("mu", &LossConfig::mu)
      .def_readwrite("theta", &LossConfig::theta)
      .def("validate", &LossConfig::validate);

  py::class_<Schedule>(m, "Schedule")
      .def(py::init<>())
      .def_readwrite("base_rate", &Schedule::base_rate)
      .def_readwrite("delta", &Schedule::delta)
      .def_readwrite("floor", &Schedule::floor)
      .def_readwrite("literal_increase", &Schedule::literal_increase);
  m.def("schedule_rate", &schedule_rate, py::arg("step"), py::arg("schedule") = Schedule{});

  py::class_<TrainOptions>(m, "TrainOptions")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainOptions::epochs)
      .def_readwrite("batch_size", &TrainOptions::batch_size)
      .def_readwrite("seed", &TrainOptions::seed)
      .def_readwrite("patience", &TrainOptions::patience)
      .def_readwrite("schedule", &TrainOptions::schedule)
      .def_readwrite("loss", &TrainOptions::loss);

  // ---- data ----

  py::class_<HsiCube>(m, "HsiCube")
      .def(py::init(&cube_from_array), py::arg("reflectance"), py::arg("wavelengths"))
      .def_property_readonly("height", &HsiCube::height)
      .def_property_readonly("width", &HsiCube::width)
      .def_property_readonly("bands", &HsiCube::bands)
      .def_property_readonly("wavelengths",
                             [](const HsiCube& c) { return std::vector<double>(c.wavelengths().begin(), c.wavelengths().end()); })
      .def("to_numpy", &cube_to_array)
      .def("__eq__", [](const HsiCube& a, const HsiCube& b) { return a == b; });

  m.attr("UNLABELED") = kUnlabeled;
  m.attr("CLASS_NAMES") = py::make_tuple("healthy", "late_blight", "soil", "background");

  py::class_<LabelMap>(m, "LabelMap")
      .def(py::init(&labels_from_array), py::arg("ids"))
      .def_property_readonly("height", &LabelMap::height)
      .def_property_readonly("width", &LabelMap::width)
      .def("labeled_count", &LabelMap::labeled_count)
      .def("histogram", &LabelMap::histogram, py::arg("n_class") = kDefaultClasses)
      .def("to_numpy", &labels_to_array)
      .def("__eq__", [](const LabelMap& a, const LabelMap& b) { return a == b; });

  py::class_<Sample>(m, "Sample")
      .def(py::init([](std::size_t r, std::size_t c, std::size_t l) { return Sample{r, c, l}; }), py::arg("row"),
           py::arg("col"), py::arg("label"))
      .def_readwrite("row", &Sample::row)
      .def_readwrite("col", &Sample::col)
      .def_readwrite("label", &Sample::label)
      .def("__repr__", [](const Sample& s) {
        std::ostringstream o;
        o << "Sample(row=" << s.row << ", col=" << s.col << ", label=" << s.label << ")";
        return o.str();
      });

  m.def("labeled_samples", &labeled_samples);
  m.def("extract_patch", [](const HsiCube& cube, std::size_t row, std::size_t col, std::size_t d) {
    const Tensor t = extract_patch(cube, row, col, d);
    py::array_t<double> out({d, d, cube.bands()});
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
  });
  m.def("subsample", &subsample, py::arg("samples"), py::arg("limit"), py::arg("seed"));
  m.def("holdout_split", [](const std::vector<Sample>& s, double fraction, std::uint64_t seed) {
    HoldoutSplit h = holdout_split(s, fraction, seed);
    return py::make_tuple(h.train, h.held_out);
  });

  m.def("read_cube", &read_cube);
  m.def("write_cube", &write_cube);
  m.def("read_labels", &read_labels);
  m.def("write_labels", &write_labels);

  py::class_<SyntheticSceneSpec>(m, "SceneSpec")
      .def(py::init<>())
      .def_readwrite("height", &SyntheticSceneSpec::height)
      .def_readwrite("width", &SyntheticSceneSpec::width)
      .def_readwrite("bands", &SyntheticSceneSpec::bands)
      .def_readwrite("wavelength_min", &SyntheticSceneSpec::wavelength_min)
      .def_readwrite("wavelength_max", &SyntheticSceneSpec::wavelength_max)
      .def_readwrite("prototypes", &SyntheticSceneSpec::prototypes)
      .def_readwrite("sigma", &SyntheticSceneSpec::sigma)
      .def_readwrite("correlation_length", &SyntheticSceneSpec::correlation_length)
      .def_readwrite("region_scale", &SyntheticSceneSpec::region_scale)
      .def_readwrite("crop_fraction", &SyntheticSceneSpec::crop_fraction)
      .def_readwrite("soil_fraction", &SyntheticSceneSpec::soil_fraction)
      .def_readwrite("blob_density", &SyntheticSceneSpec::blob_density)
      .def("wavelengths", &SyntheticSceneSpec::wavelengths)
      .def("validate", &SyntheticSceneSpec::validate);
  m.def("generate_scene", [](const SyntheticSceneSpec& spec, std::uint64_t seed) {
    Scene s = generate_scene(spec, seed);
    return py::make_tuple(std::move(s.cube), std::move(s.labels));
  }, py::arg("spec"), py::arg("seed") = 42);
  m.def("default_prototypes", &default_prototypes);
  m.def("expected_class_fractions", &expected_class_fractions);

  // ---- network ----

  m.def("squash", [](const std::vector<double>& u) { return squash(u); });
  m.def("margin_loss", py::overload_cast<std::span<const double>, std::size_t, const LossConfig&>(&margin_loss),
        py::arg("norms"), py::arg("label"), py::arg("config") = LossConfig{});

  py::class_<CapsNet>(m, "CapsNet")
      .def(py::init<NetworkConfig, std::uint64_t>(), py::arg("config") = NetworkConfig{}, py::arg("seed") = 42)
      .def_property_readonly("config", &CapsNet::config)
      .def("parameter_count", &CapsNet::parameter_count)
      .def("predict",
           [](const CapsNet& net, const F64Array& batch) {
             const Tensor t = tensor_from_array(batch);
             std::vector<Prediction> preds;
             {
               py::gil_scoped_release release;
               preds = net.predict(t);
             }
             const std::size_t n = preds.size(), c = net.config().n_class;
             py::array_t<std::int64_t> labels(static_cast<py::ssize_t>(n));
             py::array_t<double> norms({n, c});
             for (std::size_t i = 0; i < n; ++i) {
               labels.mutable_at(i) = static_cast<std::int64_t>(preds[i].label);
               for (std::size_t k = 0; k < c; ++k) norms.mutable_at(i, k) = preds[i].norms[k];
             }
             return py::make_tuple(labels, norms);
           },
           py::arg("batch"), "Classify a [N, d, d, B] batch; returns (labels, capsule norms).")
      .def("save", [](const CapsNet& net, const std::filesystem::path& p) { save_checkpoint(net, p); })
      .def_static("load", &load_checkpoint);

  m.def("train",
        [](CapsNet& model, const HsiCube& cube, const std::vector<Sample>& train_set,
           const std::vector<Sample>& validation, const TrainOptions& options) {
          TrainReport r;
          {
            py::gil_scoped_release release;
            r = train(model, cube, train_set, validation, options);
          }
          return report_dict(r);
        },
        py::arg("model"), py::arg("cube"), py::arg("train_set"), py::arg("validation"),
        py::arg("options") = TrainOptions{});
  m.def("overall_accuracy", [](const CapsNet& model, const HsiCube& cube, const std::vector<Sample>& s) {
    return overall_accuracy(model, cube, s);
  });
  m.def("predict_map",
        [](const CapsNet& model, const HsiCube& cube, std::size_t threads) {
          MapPrediction p;
          {
            py::gil_scoped_release release;
            p = predict_map(model, cube, threads);
          }
          const std::size_t c = model.config().n_class;
          py::array_t<double> norms({cube.height(), cube.width(), c});
          std::copy(p.norms.begin(), p.norms.end(), norms.mutable_data());
          return py::make_tuple(std::move(p.map), norms);
        },
        py::arg("model"), py::arg("cube"), py::arg("threads") = 1);

  // ---- evaluation ----

  py::class_<ConfusionMatrix>(m, "ConfusionMatrix")
      .def(py::init<const std::vector<std::vector<std::size_t>>&>(), py::arg("rows"))
      .def_property_readonly("n_class", &ConfusionMatrix::n_class)
      .def("at", &ConfusionMatrix::at, py::arg("predicted"), py::arg("actual"))
      .def("total", &ConfusionMatrix::total)
      .def("trace", &ConfusionMatrix::trace)
      .def("to_list", [](const ConfusionMatrix& cm) {
        std::vector<std::vector<std::size_t>> rows(cm.n_class(), std::vector<std::size_t>(cm.n_class()));
        for (std::size_t p = 0; p < cm.n_class(); ++p) {
          for (std::size_t t = 0; t < cm.n_class(); ++t) rows[p][t] = cm.at(p, t);
        }
        return rows;
      })
      .def("metrics_csv", [](const ConfusionMatrix& cm) {
        std::ostringstream out;
        write_metrics_csv(cm, out);
        return out.str();
      });
  m.def("confusion", py::overload_cast<const LabelMap&, const LabelMap&, std::size_t>(&confusion), py::arg("predicted"),
        py::arg("truth"), py::arg("n_class") = kDefaultClasses);

  m.def("class_metrics", [](const ConfusionMatrix& cm, std::size_t cls) {
    const ClassMetrics c = class_metrics(cm, cls);
    py::dict d;
    d["tp"] = c.tp;
    d["fp"] = c.fp;
    d["fn"] = c.fn;
    d["tn"] = c.tn;
    d["sensitivity"] = optional_value(c.sensitivity);
    d["specificity"] = optional_value(c.specificity);
    d["user_accuracy"] = optional_value(c.user_accuracy);
    d["producer_accuracy"] = optional_value(c.producer_accuracy);
    return d;
  });
  m.def("overall_metrics", [](const ConfusionMatrix& cm) {
    const OverallMetrics o = overall_metrics(cm);
    py::dict d;
    d["oa"] = o.oa;
    d["aa"] = optional_value(o.aa);
    d["kappa"] = optional_value(o.kappa);
    d["expected_agreement"] = o.expected_agreement;
    return d;
  });

  auto mcnemar_dict = [](const McNemarResult& r) {
    py::dict d;
    d["n01"] = r.n01;
    d["n10"] = r.n10;
    d["chi_square"] = optional_value(r.chi_square);
    d["significant_05"] = r.significant_05;
    d["significant_01"] = r.significant_01;
    return d;
  };
  m.def("mcnemar_from_counts", [mcnemar_dict](std::size_t n01, std::size_t n10) {
    return mcnemar_dict(mcnemar_from_counts(n01, n10));
  });
  m.def("mcnemar",
        [mcnemar_dict](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                       const std::vector<std::size_t>& truth) { return mcnemar_dict(mcnemar(a, b, truth)); },
        py::arg("pred_a"), py::arg("pred_b"), py::arg("truth"));

  m.def("patch_aggregate", [](const LabelMap& pred, const LabelMap& truth, std::size_t cell_px) {
    const PatchGridReport r = patch_aggregate(pred, truth, cell_px);
    py::list cells;
    for (const GridCell& c : r.cells) {
      py::dict d;
      d["cell_row"] = c.cell_row;
      d["cell_col"] = c.cell_col;
      d["partial"] = c.partial;
      d["truth_ratio"] = optional_value(c.truth_ratio);
      d["predicted_ratio"] = optional_value(c.predicted_ratio);
      d["difference"] = optional_value(c.difference);
      cells.append(d);
    }
    py::dict out;
    out["grid_rows"] = r.grid_rows;
    out["grid_cols"] = r.grid_cols;
    out["cells"] = cells;
    out["mean_difference"] = optional_value(r.mean_difference);
    out["max_difference"] = optional_value(r.max_difference);
    return out;
  });
  m.def("export_map", &export_map);
  m.def("read_map", &read_map);
  (void)base;
}
