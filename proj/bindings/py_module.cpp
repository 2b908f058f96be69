// Python bindings for the few-shot engine: dataset synthesis and IO, the
// self-supervised image transforms, training runs, checkpoint loading,
// feature extraction, and episodic evaluation. Arrays cross the boundary as
// copies in float32 (images are [C,H,W] or [B,C,H,W], values in [0,1]).

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <string>
#include <vector>

#include "fewshot/checkpoint.hpp"
#include "fewshot/config.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/eval.hpp"
#include "fewshot/model.hpp"
#include "fewshot/ssl_tasks.hpp"
#include "fewshot/synth.hpp"
#include "fewshot/train.hpp"

namespace py = pybind11;
using namespace fewshot;

namespace {

using FArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> tensor_from(const FArray& a, size_t want_rank, const char* what) {
  if (size_t(a.ndim()) != want_rank)
    throw DimensionError(std::string(what) + ": expected a " +
                         std::to_string(want_rank) + "-d array, got " +
                         std::to_string(a.ndim()) + "-d");
  std::vector<size_t> shape(size_t(a.ndim()));
  for (size_t i = 0; i < shape.size(); ++i) shape[i] = size_t(a.shape(py::ssize_t(i)));
  Tensor<float> t(shape);
  std::copy(a.data(), a.data() + t.numel(), t.data());
  return t;
}

py::array_t<float> numpy_from(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.rank());
  for (size_t i = 0; i < t.rank(); ++i) shape[i] = py::ssize_t(t.dim(i));
  py::array_t<float> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

// Checkpointed model plus its training record, shared so views stay valid.
struct PyModel {
  std::shared_ptr<LoadedCheckpoint> ckpt;

  ModelBundle<float>& model() { return *ckpt->model; }

  py::array_t<float> features(const FArray& images) {
    Tensor<float> batch = tensor_from(images, 4, "features");
    const size_t b = batch.dim(0);
    const size_t d = model().config().feature_dim();
    Tensor<float> out({b, d});
    // Chunked so activation memory stays bounded for large batches.
    for (size_t at = 0; at < b; at += 256) {
      const size_t n = std::min<size_t>(256, b - at);
      Tensor<float> chunk({n, batch.dim(1), batch.dim(2), batch.dim(3)});
      std::copy(batch.data() + at * chunk.numel() / n,
                batch.data() + (at + n) * (chunk.numel() / n), chunk.data());
      Graph<float> g;
      Var flat = model().extractor().forward_images(g, g.input(std::move(chunk)),
                                                    BnMode::Eval).flat;
      const Tensor<float>& v = g.value(flat);
      std::copy(v.data(), v.data() + n * d, out.data() + at * d);
    }
    return numpy_from(out);
  }

  py::array_t<float> head_logits(const FArray& images, bool rotation) {
    Tensor<float> batch = tensor_from(images, 4, "logits");
    Graph<float> g;
    auto fw = model().extractor().forward_images(g, g.input(std::move(batch)),
                                                 BnMode::Eval);
    Var logits{-1};
    if (rotation) {
      if (!model().has_rot_head())
        throw CompatibilityError("checkpoint has no rotation head");
      logits = model().rot_head().logits(g, fw.maps, BnMode::Eval);
    } else {
      if (!model().has_classifier())
        throw CompatibilityError("checkpoint has no base classifier");
      logits = model().classifier().logits(g, fw.flat);
    }
    return numpy_from(g.value(logits));
  }

  py::dict evaluate_on(const DatasetContainer& ds, uint32_t n_way, uint32_t k_shot,
                       uint32_t m_query, uint32_t episodes, uint64_t seed,
                       const std::string& split, const std::string& similarity) {
    EvalProtocol proto;
    proto.n_way = n_way;
    proto.k_shot = k_shot;
    proto.m_query = m_query;
    proto.episodes = episodes;
    proto.base_seed = seed;
    proto.split = split_from_name(split);
    proto.similarity = similarity_from_name(similarity);
    EvalResult res;
    {
      py::gil_scoped_release release;
      res = evaluate(model(), ds, proto);
    }
    py::dict out;
    out["mean_acc"] = res.mean_acc;
    out["ci95"] = res.ci95;
    out["ci95_defined"] = res.ci95_defined;
    out["episode_acc"] = res.episode_acc;
    out["report_json"] = eval_report_json(proto, res, ckpt->params_sha256).dump(2);
    return out;
  }

  py::dict record() const {
    const TrainRecord& r = ckpt->record;
    py::dict out;
    out["epochs_run"] = r.epochs_run;
    out["best_epoch"] = r.best_epoch;
    out["best_val_acc"] = r.best_val_acc;
    out["val_history"] = r.val_history;
    out["selfsup_only"] = r.selfsup_only;
    out["alpha"] = r.alpha;
    out["config_digest"] = r.config_digest;
    return out;
  }
};

py::dict train_from_json(const std::string& config_json, const std::string& out_dir,
                         const std::string& base_dir, const py::object& status) {
  RunConfig cfg = parse_run_config(nlohmann::json::parse(config_json), base_dir);
  validate_run_config(cfg);
  StatusFn cb = nullptr;
  if (!status.is_none()) {
    cb = [status](const std::string& line) {
      py::gil_scoped_acquire acquire;
      status(line);
    };
  }
  TrainOutcome out;
  {
    py::gil_scoped_release release;
    out = run_training(cfg, out_dir, cb);
  }
  py::dict d;
  d["checkpoint_dir"] = out.checkpoint_dir.string();
  d["epochs_run"] = out.record.epochs_run;
  d["best_epoch"] = out.record.best_epoch;
  d["best_val_acc"] = out.record.best_val_acc;
  d["val_history"] = out.record.val_history;
  d["config_digest"] = out.record.config_digest;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot image classification engine with self-supervised "
            "auxiliary tasks (native core)";

  py::register_exception<Error>(m, "EngineError", PyExc_RuntimeError);
  py::register_local_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const DimensionError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const LabelError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const FormatError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const ConfigError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const CapacityError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const SamplingError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const IoError& e) {
      PyErr_SetString(PyExc_OSError, e.what());
    }
  });

  py::class_<DatasetContainer>(m, "Dataset")
      .def_readonly("channels", &DatasetContainer::channels)
      .def_readonly("height", &DatasetContainer::height)
      .def_readonly("width", &DatasetContainer::width)
      .def_readonly("class_names", &DatasetContainer::class_names)
      .def_readonly("labels", &DatasetContainer::labels)
      .def_property_readonly("num_images", &DatasetContainer::num_images)
      .def_property_readonly("num_classes", &DatasetContainer::num_classes)
      .def("classes_of",
           [](const DatasetContainer& ds, const std::string& split) {
             return ds.classes_of(split_from_name(split));
           },
           py::arg("split"), "Class ids in a split ('base'/'validation'/'novel')")
      .def("image",
           [](const DatasetContainer& ds, size_t idx) {
             return numpy_from(ds.image<float>(idx));
           },
           py::arg("index"), "One image as float32 [C,H,W] in [0,1]")
      .def("batch",
           [](const DatasetContainer& ds, const std::vector<uint32_t>& idxs) {
             return numpy_from(ds.batch<float>(idxs));
           },
           py::arg("indices"), "Image batch as float32 [B,C,H,W] in [0,1]")
      .def("save",
           [](const DatasetContainer& ds, const std::string& path) {
             save_fsds(ds, path);
           },
           py::arg("path"), "Write the dataset file (byte-reproducible)");

  m.def("synthesize",
        [](uint32_t base_classes, uint32_t val_classes, uint32_t novel_classes,
           uint32_t images_per_class, uint32_t image_size, uint64_t seed) {
          SynthSpec spec;
          spec.base_classes = base_classes;
          spec.val_classes = val_classes;
          spec.novel_classes = novel_classes;
          spec.images_per_class = images_per_class;
          spec.image_size = image_size;
          spec.seed = seed;
          py::gil_scoped_release release;
          return make_synthetic(spec);
        },
        py::arg("base_classes") = 24, py::arg("val_classes") = 8,
        py::arg("novel_classes") = 8, py::arg("images_per_class") = 200,
        py::arg("image_size") = 32, py::arg("seed") = 0,
        "Procedurally generate a deterministic synthetic shape dataset");

  m.def("load_dataset", &load_fsds, py::arg("path"), "Read a dataset file");

  m.def("rotate_image",
        [](const FArray& img, int r) {
          return numpy_from(rotate_image(tensor_from(img, 3, "rotate_image"), r));
        },
        py::arg("image"), py::arg("quarter_turns"),
        "Rotate [C,H,W] by r*90 degrees counter-clockwise (r in 0..3)");

  m.def("extract_patches",
        [](const FArray& img, uint64_t seed) {
          PatchSet<float> ps =
              extract_patches(tensor_from(img, 3, "extract_patches"), seed);
          return py::make_tuple(numpy_from(ps.patches), ps.grayscaled);
        },
        py::arg("image"), py::arg("seed"),
        "Nine jittered, per-patch-normalized 3x3 grid patches [9,C,24,24] and "
        "whether the grayscale branch was taken");

  m.def("patch_pair_label", &patch_pair_label, py::arg("region_index"),
        "Relative-location class (1..8) of a neighbor region; 0 for the center");
  m.def("region_of_pair_label", &region_of_pair_label, py::arg("label"),
        "Inverse of patch_pair_label for labels 1..8");

  m.def("mean_ci95", &mean_ci95, py::arg("values"),
        "Sample mean and 95% normal-approximation confidence half-width");

  m.def("train", &train_from_json, py::arg("config_json"), py::arg("out_dir"),
        py::arg("base_dir") = ".", py::arg("status") = py::none(),
        "Run a training job from a JSON config string; returns the run record");

  py::class_<PyModel>(m, "Model")
      .def_static("load",
                  [](const std::string& dir) {
                    PyModel pm;
                    pm.ckpt = std::make_shared<LoadedCheckpoint>(load_checkpoint(dir));
                    return pm;
                  },
                  py::arg("checkpoint_dir"), "Load a training checkpoint")
      .def_property_readonly("params_sha256",
                             [](const PyModel& pm) { return pm.ckpt->params_sha256; })
      .def_property_readonly("record", &PyModel::record)
      .def_property_readonly("feature_dim",
                             [](PyModel& pm) { return pm.model().config().feature_dim(); })
      .def("features", &PyModel::features, py::arg("images"),
           "Inference-mode embeddings, float32 [B, feature_dim]")
      .def("base_logits",
           [](PyModel& pm, const FArray& images) { return pm.head_logits(images, false); },
           py::arg("images"), "Base-classifier scores, float32 [B, n_base]")
      .def("rotation_logits",
           [](PyModel& pm, const FArray& images) { return pm.head_logits(images, true); },
           py::arg("images"), "Rotation-head scores, float32 [B, 4]")
      .def("evaluate", &PyModel::evaluate_on, py::arg("dataset"), py::arg("n_way") = 5,
           py::arg("k_shot") = 1, py::arg("m_query") = 15, py::arg("episodes") = 600,
           py::arg("seed") = 12345, py::arg("split") = "novel",
           py::arg("similarity") = "cosine",
           "Episodic N-way K-shot evaluation; returns mean/CI and the report JSON");
}
