#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "scanmtl/commands.hpp"
#include "scanmtl/errors.hpp"
#include "scanmtl/losses.hpp"
#include "scanmtl/metrics.hpp"
#include "scanmtl/pipeline.hpp"

namespace py = pybind11;
using namespace mcx;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// JSON crosses the boundary as text so Python sees plain dicts.
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

Tensor tensor_from(const F64& a) {
  std::vector<int> shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

F64 array_from(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  F64 a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

Mask mask_from(const U8& a) {
  if (a.ndim() != 2) throw std::invalid_argument("mask must be 2-D");
  Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.values.begin());
  return m;
}

template <class T>
py::array_t<T> grid_array(const Grid<T>& g) {
  py::array_t<T> a({g.rows, g.cols});
  std::copy(g.values.begin(), g.values.end(), a.mutable_data());
  return a;
}

Box box_from(const py::sequence& s) {
  if (py::len(s) < 4) throw std::invalid_argument("a box is (c_x, c_y, l, w)");
  return Box{s[0].cast<double>(), s[1].cast<double>(), s[2].cast<double>(), s[3].cast<double>()};
}

py::tuple box_tuple(const Box& b) { return py::make_tuple(b.c_x, b.c_y, b.l, b.w); }

ImageBatch batch_from(const F64& images) {
  if (images.ndim() != 3) throw std::invalid_argument("images must be M x L x W");
  ImageBatch b;
  b.pixels = tensor_from(images);
  for (int i = 0; i < b.pixels.dim(0); ++i) b.ids.push_back(std::to_string(i));
  return b;
}

py::dict diagnosis_dict(const Diagnosis& d) {
  py::dict out;
  out["class_probs"] = d.class_probs;
  out["positive"] = d.positive;
  py::list boxes;
  for (const auto& sb : d.boxes) boxes.append(py::make_tuple(sb.box.c_x, sb.box.c_y, sb.box.l, sb.box.w, sb.score));
  out["boxes"] = boxes;
  out["mask"] = d.mask ? py::object(grid_array(*d.mask)) : py::object(py::none());
  return out;
}

py::dict dataset_dict(const Dataset& d) {
  const auto n = static_cast<py::ssize_t>(d.size());
  F64 images({n, static_cast<py::ssize_t>(d.rows), static_cast<py::ssize_t>(d.cols)});
  double* px = images.mutable_data();
  py::list ids, labels, boxes, masks;
  for (const Sample& s : d.samples) {
    px = std::copy(s.image.values.begin(), s.image.values.end(), px);
    ids.append(s.id);
    labels.append(s.labels.cls ? py::cast(*s.labels.cls) : py::none());
    py::list bl;
    if (s.labels.boxes) {
      for (const Box& b : *s.labels.boxes) bl.append(box_tuple(b));
    }
    boxes.append(bl);
    masks.append(s.labels.mask ? py::object(grid_array(*s.labels.mask)) : py::object(py::none()));
  }
  py::dict out;
  out["name"] = d.name;
  out["ids"] = ids;
  out["images"] = images;
  out["labels"] = labels;
  out["boxes"] = boxes;
  out["masks"] = masks;
  return out;
}

class Model {
 public:
  explicit Model(ModelParams p) : p_(std::move(p)) {}

  static Model create(const py::object& arch, std::uint64_t seed) {
    ArchConfig a;
    if (!arch.is_none()) a = from_py(arch).get<ArchConfig>();
    a.validate();
    return Model(init_params(a, seed));
  }
  static Model load(const std::filesystem::path& path) { return Model(load_params(path)); }

  void save(const std::filesystem::path& path) const { save_params(p_, path); }
  py::object arch() const { return to_py(nlohmann::json(p_.arch)); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (Group g : kAllGroups) n += p_.group(g).parameter_count();
    return n;
  }

  F64 encode(const F64& images) const { return array_from(mcx::encode(p_, batch_from(images)).features); }
  F64 classify(const F64& images) const {
    return array_from(mcx::classify(p_, mcx::encode(p_, batch_from(images))));
  }

  py::list diagnose(const F64& images, double threshold) const {
    InferenceOptions o;
    o.threshold = threshold;
    py::list out;
    for (const auto& d : infer_pipeline(p_, batch_from(images), o)) out.append(diagnosis_dict(d));
    return out;
  }

 private:
  ModelParams p_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Shared-encoder classification, detection and segmentation of grayscale scans";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_OSError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  py::class_<Model>(m, "Model")
      .def(py::init(&Model::create), py::arg("arch") = py::none(), py::arg("seed") = 0,
           "Fresh parameters for an architecture dict (defaults when None).")
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("arch", &Model::arch)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("encode", &Model::encode, py::arg("images"))
      .def("classify", &Model::classify, py::arg("images"))
      .def("diagnose", &Model::diagnose, py::arg("images"), py::arg("threshold") = kDefaultFilterThreshold,
           "Per image: class_probs, positive, boxes as (c_x, c_y, l, w, score), mask or None.");

  m.def(
      "generate_synthetic",
      [](int num_samples, int size, std::uint64_t seed, double positive_fraction, const std::string& style) {
        SyntheticConfig c;
        c.num_samples = num_samples;
        c.rows = c.cols = size;
        c.seed = seed;
        c.positive_fraction = positive_fraction;
        if (style == "inverted") {
          c.style = SyntheticStyle::inverted;
        } else if (style != "standard") {
          throw ConfigError("style must be 'standard' or 'inverted'");
        }
        return dataset_dict(generate_synthetic(c));
      },
      py::arg("num_samples"), py::arg("size") = 64, py::arg("seed") = 0, py::arg("positive_fraction") = 0.5,
      py::arg("style") = "standard");
  m.def(
      "load_dataset", [](const std::filesystem::path& dir) { return dataset_dict(load_dataset(dir)); },
      py::arg("path"));

  m.def("box_from_mask", [](const U8& mask) {
    py::list out;
    for (const Box& b : box_from_mask(mask_from(mask))) out.append(box_tuple(b));
    return out;
  });
  m.def("iou", [](const py::sequence& a, const py::sequence& b) { return iou(box_from(a), box_from(b)); });
  m.def("dice", [](const U8& a, const U8& b) { return dice(mask_from(a), mask_from(b)); });
  m.def("accuracy", [](const F64& y, const F64& y_hat) { return accuracy(tensor_from(y), tensor_from(y_hat)); });
  m.def("f1_score", [](const F64& y, const F64& y_hat) { return f1_score(tensor_from(y), tensor_from(y_hat)); });
  m.def(
      "mean_average_precision",
      [](const std::vector<std::vector<py::sequence>>& gt, const std::vector<std::vector<py::sequence>>& pred,
         double iou_threshold) {
        std::vector<std::vector<Box>> g(gt.size());
        std::vector<std::vector<ScoredBox>> p(pred.size());
        for (std::size_t i = 0; i < gt.size(); ++i)
          for (const auto& b : gt[i]) g[i].push_back(box_from(b));
        for (std::size_t i = 0; i < pred.size(); ++i)
          for (const auto& b : pred[i]) p[i].push_back({box_from(b), b[4].cast<double>()});
        return mean_average_precision(g, p, iou_threshold);
      },
      py::arg("gt"), py::arg("pred"), py::arg("iou_threshold") = 0.5,
      "gt: per image [(c_x, c_y, l, w)]; pred: per image [(c_x, c_y, l, w, score)].");
  m.def("loss_cls", [](const F64& y, const F64& y_hat) { return loss_cls(tensor_from(y), tensor_from(y_hat)); });
  m.def("loss_seg", [](const F64& y, const F64& y_hat) { return loss_seg(tensor_from(y), tensor_from(y_hat)); });

  m.def(
      "default_config", [] { return to_py(nlohmann::json(RunConfig{})); },
      "The fully expanded default run configuration.");
  m.def(
      "generate_data",
      [](const py::dict& config, const std::filesystem::path& out) {
        cmd::gen_data(run_config_from_json(from_py(config)), out);
      },
      py::arg("config"), py::arg("out"));
  m.def(
      "run_protocol",
      [](const py::dict& config, const std::filesystem::path& data, const std::filesystem::path& out) {
        const RunConfig cfg = run_config_from_json(from_py(config));
        const ProtocolResult r = [&] {
          py::gil_scoped_release release;
          return cmd::protocol(cfg, data, out);
        }();
        py::list reports;
        for (const auto& rep : r.reports) reports.append(to_py(report_json(rep)));
        return py::make_tuple(Model(r.params), reports);
      },
      py::arg("config"), py::arg("data"), py::arg("out"),
      "Runs every phase on <data>/train (and <data>/new_train when present); returns (model, reports).");
  m.def(
      "evaluate",
      [](const Model& model, const py::dict& config, const std::filesystem::path& data, const std::string& tasks,
         const std::filesystem::path& ckpt_dir) {
        // Round-trips through a checkpoint file so the same loader as the CLI is used.
        const RunConfig cfg = run_config_from_json(from_py(config));
        const auto path = ckpt_dir / "evaluate.ckpt";
        model.save(path);
        return to_py(report_json(cmd::evaluate(cfg, path, data, TaskSet::parse(tasks), ckpt_dir)));
      },
      py::arg("model"), py::arg("config"), py::arg("data"), py::arg("tasks") = "cls,det,seg", py::arg("out"));
}
