#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "segcam/checkpoint.hpp"
#include "segcam/explainer.hpp"
#include "segcam/gradcheck.hpp"
#include "segcam/render.hpp"
#include "segcam/synth.hpp"
#include "segcam/trainer.hpp"

namespace py = pybind11;
using namespace segcam;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

// numpy [C,H,W] -> [1,C,H,W]
TensorF image_from(const FloatArray& a) {
  if (a.ndim() != 3) throw std::invalid_argument("image must have shape (C, H, W)");
  const int c = static_cast<int>(a.shape(0)), h = static_cast<int>(a.shape(1)), w = static_cast<int>(a.shape(2));
  return TensorF(Shape{1, c, h, w}, std::vector<float>(a.data(), a.data() + a.size()));
}

TensorF mask_from(const IntArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("mask must have shape (H, W)");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  return TensorF(Shape{1, 1, h, w}, std::vector<float>(a.data(), a.data() + a.size()));
}

// Drops leading unit axes beyond `keep` trailing dims.
FloatArray to_numpy(const TensorF& t, int keep) {
  std::vector<py::ssize_t> shape;
  for (int i = t.rank() - keep; i < t.rank(); ++i) shape.push_back(t.dim(i));
  FloatArray out(shape);
  std::memcpy(out.mutable_data(), t.data().data(), t.size() * sizeof(float));
  return out;
}

IntArray labels_to_numpy(const TensorF& mask) {
  IntArray out({mask.dim(mask.rank() - 2), mask.dim(mask.rank() - 1)});
  auto* p = out.mutable_data();
  for (std::size_t i = 0; i < mask.size(); ++i) p[i] = static_cast<std::int32_t>(mask[i]);
  return out;
}

std::vector<Sample> samples_from(const FloatArray& images, const IntArray& masks) {
  if (images.ndim() != 4 || masks.ndim() != 3 || images.shape(0) != masks.shape(0)) {
    throw std::invalid_argument("expected images (N, C, H, W) and masks (N, H, W)");
  }
  const auto n = images.shape(0);
  const int c = static_cast<int>(images.shape(1)), h = static_cast<int>(images.shape(2)),
            w = static_cast<int>(images.shape(3));
  if (masks.shape(1) != h || masks.shape(2) != w) throw std::invalid_argument("mask size differs from image size");
  std::vector<Sample> out;
  const std::size_t isz = static_cast<std::size_t>(c) * h * w, msz = static_cast<std::size_t>(h) * w;
  for (py::ssize_t k = 0; k < n; ++k) {
    Sample s;
    s.image = TensorF(Shape{1, c, h, w}, std::vector<float>(images.data() + k * isz, images.data() + (k + 1) * isz));
    std::vector<float> m(msz);
    for (std::size_t i = 0; i < msz; ++i) m[i] = static_cast<float>(masks.data()[k * msz + i]);
    s.mask = TensorF(Shape{1, 1, h, w}, std::move(m));
    s.id = sample_id(static_cast<int>(k));
    out.push_back(std::move(s));
  }
  return out;
}

PixelSet pixel_set_from(const std::optional<std::pair<int, int>>& point,
                        const std::optional<std::array<int, 4>>& rect, const std::optional<IntArray>& mask,
                        const std::optional<int>& predicted) {
  const int given = point.has_value() + rect.has_value() + mask.has_value() + predicted.has_value();
  if (given > 1) throw std::invalid_argument("give at most one of point, rect, mask, predicted");
  if (point) return pixels::Single{point->first, point->second};
  if (rect) return pixels::Rect{(*rect)[0], (*rect)[1], (*rect)[2], (*rect)[3]};
  if (mask) {
    if (mask->ndim() != 2) throw std::invalid_argument("mask must have shape (H, W)");
    pixels::Mask m{static_cast<int>(mask->shape(0)), static_cast<int>(mask->shape(1)), {}};
    for (py::ssize_t i = 0; i < mask->size(); ++i) m.bits.push_back(mask->data()[i] != 0);
    return m;
  }
  if (predicted) return pixels::PredictedClass{*predicted};
  return pixels::All{};
}

py::dict heatmap_dict(const Heatmap& hm) {
  py::dict d;
  d["tap"] = hm.tap;
  d["class_id"] = hm.class_id;
  d["raw"] = to_numpy(hm.raw, 2);
  d["pre_relu"] = to_numpy(hm.pre_relu, 2);
  d["normalized"] = to_numpy(hm.normalized, 2);
  d["upsampled"] = to_numpy(hm.upsampled, 2);
  d["alpha"] = hm.weights.alpha;
  return d;
}

py::dict metrics_dict(const SegMetrics& m) {
  py::dict d;
  d["pixel_accuracy"] = m.pixel_accuracy;
  d["mean_iou"] = m.mean_iou;
  d["class_iou"] = m.class_iou;
  return d;
}

class PyModel {
 public:
  PyModel(int base_channels, int depth, std::uint64_t seed, int num_classes, int in_channels)
      : ckpt_{UNet(make_config(in_channels, num_classes, base_channels, depth), seed), synth_class_names(),
              nlohmann::json::object()} {}
  explicit PyModel(Checkpoint ckpt) : ckpt_(std::move(ckpt)) {}

  static PyModel load(const std::filesystem::path& path) { return PyModel(load_checkpoint(path)); }
  void save(const std::filesystem::path& path) const { save_checkpoint(ckpt_, path); }
  py::bytes to_bytes() const {
    const Bytes b = encode_checkpoint(ckpt_);
    return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
  }
  std::string hash() const { return fnv1a_hex(encode_checkpoint(ckpt_)); }

  const UNet& net() const { return ckpt_.model; }
  const std::vector<std::string>& class_names() const { return ckpt_.class_names; }
  std::string training_json() const { return ckpt_.training.dump(); }

  FloatArray logits(const FloatArray& image) const { return to_numpy(net().forward(image_from(image)).logits_value(), 3); }
  IntArray predict(const FloatArray& image) const {
    return labels_to_numpy(predict_mask(net().forward(image_from(image)).logits_value()));
  }

  py::list train(const FloatArray& images, const IntArray& masks, int epochs, double lr, int batch_size,
                 std::uint64_t seed, const std::function<void(py::dict)>& on_epoch) {
    const auto samples = samples_from(images, masks);
    for (const auto& s : samples) net().check_input(s.image.shape());
    TrainConfig tc;
    tc.epochs = epochs;
    tc.learning_rate = lr;
    tc.batch_size = batch_size;
    tc.seed = seed;
    tc.validate();
    py::list history;
    const auto hist = segcam::train(ckpt_.model, samples, tc, [&](const EpochMetrics& m) {
      py::dict d;
      d["epoch"] = m.epoch;
      d["loss"] = m.loss;
      d["pixel_accuracy"] = m.pixel_accuracy;
      d["mean_iou"] = m.mean_iou;
      if (on_epoch) on_epoch(d);
      history.append(d);
    });
    ckpt_.training = {{"epochs", epochs}, {"seed", seed},        {"learning_rate", lr},
                      {"batch_size", batch_size}, {"optimizer", "adam"}, {"final_loss", hist.back().loss}};
    return history;
  }

  py::dict evaluate(const FloatArray& images, const IntArray& masks) const {
    return metrics_dict(segcam::evaluate(net(), samples_from(images, masks)));
  }

  py::dict explain(const FloatArray& image, int class_id, const std::string& tap, const PixelSet& ps,
                   float scale) const {
    return heatmap_dict(seg_grad_cam(net(), image_from(image), ExplainRequest{class_id, tap, ps, scale}));
  }

  FloatArray saliency(const FloatArray& image, int class_id, const PixelSet& ps) const {
    return to_numpy(saliency_map(net(), image_from(image), ExplainRequest{class_id, "logits", ps}), 2);
  }

  py::list sweep(const FloatArray& image, int class_id, const PixelSet& ps, float scale) const {
    py::list out;
    for (const auto& row : layer_sweep(net(), image_from(image), class_id, ps, scale)) {
      py::dict d = heatmap_dict(row.heatmap);
      d["logit_similarity"] = row.logit_similarity;
      d["edge_similarity"] = row.edge_similarity;
      out.append(d);
    }
    return out;
  }

 private:
  static UNetConfig make_config(int in_channels, int num_classes, int base_channels, int depth) {
    UNetConfig c{in_channels, num_classes, base_channels, depth};
    c.validate();
    return c;
  }

  Checkpoint ckpt_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Seg-Grad-CAM workbench core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<UnknownTapError>(m, "UnknownTapError", PyExc_KeyError);
  py::register_exception<ExplainError>(m, "ExplainError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.def("class_names", &synth_class_names);

  m.def(
      "generate",
      [](std::uint64_t seed, int count, int size) {
        const DatasetSpec spec{seed, count, size};
        spec.validate();
        const auto samples = segcam::generate(spec);
        FloatArray images({static_cast<py::ssize_t>(count), py::ssize_t{3}, static_cast<py::ssize_t>(size),
                           static_cast<py::ssize_t>(size)});
        IntArray masks({static_cast<py::ssize_t>(count), static_cast<py::ssize_t>(size), static_cast<py::ssize_t>(size)});
        const std::size_t isz = 3u * size * size, msz = static_cast<std::size_t>(size) * size;
        for (std::size_t k = 0; k < samples.size(); ++k) {
          std::memcpy(images.mutable_data() + k * isz, samples[k].image.data().data(), isz * sizeof(float));
          for (std::size_t i = 0; i < msz; ++i)
            masks.mutable_data()[k * msz + i] = static_cast<std::int32_t>(samples[k].mask[i]);
        }
        return py::make_tuple(images, masks);
      },
      py::arg("seed"), py::arg("count"), py::arg("size") = 64,
      "Synthetic shapes: images (N,3,H,W) float32 in [0,1] and masks (N,H,W) int32.");

  m.def(
      "write_dataset",
      [](const std::filesystem::path& dir, std::uint64_t seed, int count, int size) {
        const DatasetSpec spec{seed, count, size};
        spec.validate();
        segcam::write_dataset(dir, spec, segcam::generate(spec));
      },
      py::arg("dir"), py::arg("seed"), py::arg("count"), py::arg("size") = 64);

  m.def(
      "write_ppm",
      [](const FloatArray& image) {
        const Bytes b = segcam::write_ppm(image_from(image));
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      },
      py::arg("image"));
  m.def(
      "read_ppm",
      [](const py::bytes& data) {
        const std::string s = data;
        return to_numpy(segcam::read_ppm(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 3);
      },
      py::arg("data"));
  m.def(
      "write_pgm",
      [](const IntArray& mask) {
        const Bytes b = segcam::write_pgm(mask_from(mask));
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      },
      py::arg("mask"));
  m.def(
      "read_pgm",
      [](const py::bytes& data) {
        const std::string s = data;
        return labels_to_numpy(segcam::read_pgm(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
      },
      py::arg("data"));

  m.def(
      "colorize_overlay",
      [](const FloatArray& image, const FloatArray& heat) {
        if (heat.ndim() != 2) throw std::invalid_argument("heat must have shape (H, W)");
        TensorF h(Shape{static_cast<int>(heat.shape(0)), static_cast<int>(heat.shape(1))},
                  std::vector<float>(heat.data(), heat.data() + heat.size()));
        return to_numpy(segcam::colorize_overlay(image_from(image), h), 3);
      },
      py::arg("image"), py::arg("heat"));

  m.def(
      "gradcheck",
      [](std::uint64_t seed, int seeds, int image_size, int depth) {
        GradcheckOptions o;
        o.seed = seed;
        o.seeds = seeds;
        o.image_size = image_size;
        o.depth = depth;
        GradcheckReport r;
        {
          py::gil_scoped_release release;
          r = run_gradcheck(o);
        }
        py::list rows;
        for (const auto& row : r.rows) {
          py::dict d;
          d["name"] = row.name;
          d["max_relative_error"] = row.max_relative_error;
          d["checked"] = row.checked;
          d["skipped"] = row.skipped;
          rows.append(d);
        }
        py::dict d;
        d["rows"] = rows;
        d["max_relative_error"] = r.max_relative_error;
        d["seconds"] = r.seconds;
        d["passed"] = r.passed;
        return d;
      },
      py::arg("seed") = 0, py::arg("seeds") = 20, py::arg("image_size") = 16, py::arg("depth") = 2);

  // Pixel-set keywords shared by explain / saliency / sweep. With none given
  // the whole output is selected.
  auto ps_of = [](const py::kwargs& kw) {
    std::optional<std::pair<int, int>> point;
    std::optional<std::array<int, 4>> rect;
    std::optional<IntArray> mask;
    std::optional<int> predicted;
    for (auto item : kw) {
      const auto key = item.first.cast<std::string>();
      if (item.second.is_none()) continue;
      if (key == "point") point = item.second.cast<std::pair<int, int>>();
      else if (key == "rect") rect = item.second.cast<std::array<int, 4>>();
      else if (key == "mask") mask = item.second.cast<IntArray>();
      else if (key == "predicted") predicted = item.second.cast<int>();
      else if (key != "scale") throw py::type_error("unexpected keyword '" + key + "'");
    }
    return pixel_set_from(point, rect, mask, predicted);
  };
  auto scale_of = [](const py::kwargs& kw) { return kw.contains("scale") ? kw["scale"].cast<float>() : 1.0f; };

  py::class_<PyModel>(m, "Model")
      .def(py::init<int, int, std::uint64_t, int, int>(), py::arg("base_channels") = 8, py::arg("depth") = 2,
           py::arg("seed") = 0, py::arg("num_classes") = 4, py::arg("in_channels") = 3)
      .def_static("load", &PyModel::load, py::arg("path"))
      .def("save", &PyModel::save, py::arg("path"))
      .def("to_bytes", &PyModel::to_bytes)
      .def("hash", &PyModel::hash)
      .def_property_readonly("tap_names", [](const PyModel& p) { return p.net().tap_names(); })
      .def_property_readonly("class_names", &PyModel::class_names)
      .def_property_readonly("training", &PyModel::training_json)
      .def_property_readonly("size_divisor", [](const PyModel& p) { return p.net().size_divisor(); })
      .def("logits", &PyModel::logits, py::arg("image"))
      .def("predict", &PyModel::predict, py::arg("image"))
      .def("train", &PyModel::train, py::arg("images"), py::arg("masks"), py::arg("epochs") = 20,
           py::arg("lr") = 1e-3, py::arg("batch_size") = 4, py::arg("seed") = 0,
           py::arg("on_epoch") = std::function<void(py::dict)>{})
      .def("evaluate", &PyModel::evaluate, py::arg("images"), py::arg("masks"))
      .def(
          "explain",
          [ps_of, scale_of](const PyModel& p, const FloatArray& image, int class_id, const std::string& tap,
                            const py::kwargs& kw) { return p.explain(image, class_id, tap, ps_of(kw), scale_of(kw)); },
          py::arg("image"), py::arg("class_id"), py::arg("tap") = "bottleneck.conv2",
          "Seg-Grad-CAM heatmap. Pixel set keywords: point=(i,j), rect=(i0,j0,i1,j1), mask=array, "
          "predicted=class; default all pixels. scale multiplies the objective.")
      .def(
          "saliency",
          [ps_of](const PyModel& p, const FloatArray& image, int class_id, const py::kwargs& kw) {
            return p.saliency(image, class_id, ps_of(kw));
          },
          py::arg("image"), py::arg("class_id"))
      .def(
          "sweep",
          [ps_of, scale_of](const PyModel& p, const FloatArray& image, int class_id, const py::kwargs& kw) {
            return p.sweep(image, class_id, ps_of(kw), scale_of(kw));
          },
          py::arg("image"), py::arg("class_id"));
}
