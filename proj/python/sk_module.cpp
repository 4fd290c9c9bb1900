#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sklab/error.hpp"
#include "sklab/experiment.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(std::span<const double> values, const std::vector<std::size_t>& shape) {
  Array out(shape);
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

sk::Tensor to_tensor(const Array& a) {
  sk::Shape shape(a.shape(), a.shape() + a.ndim());
  return sk::Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

sk::Dataset make_dataset(const Array& pixels, const std::vector<int>& labels, std::size_t num_classes) {
  if (pixels.ndim() != 4) throw sk::Error(sk::ErrorKind::kShapeMismatch, "Dataset", "pixels must be N x C x H x W");
  sk::Dataset d;
  d.image_shape = {static_cast<std::size_t>(pixels.shape(1)), static_cast<std::size_t>(pixels.shape(2)),
                   static_cast<std::size_t>(pixels.shape(3))};
  d.pixels.assign(pixels.data(), pixels.data() + pixels.size());
  d.labels = labels;
  for (std::size_t c = 0; c < num_classes; ++c) d.class_names.push_back("class" + std::to_string(c));
  d.validate();
  return d;
}

py::dict eval_dict(const sk::EvalReport& r) {
  py::dict d;
  d["asr"] = r.asr;
  d["clean_accuracy"] = r.clean_accuracy;
  d["n_success"] = r.n_success;
  d["n_total"] = r.n_total;
  d["n_other_class"] = r.n_other_class;
  d["n_still_source"] = r.n_still_source;
  d["confusion"] = r.confusion;
  return d;
}

}  // namespace

PYBIND11_MODULE(_sk, m) {
  m.doc() = "Clean-label backdoor laboratory: data, models, triggers, poisons and experiments.";

  py::register_exception<sk::Error>(m, "SkError", PyExc_RuntimeError);

  py::class_<sk::Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("pixels"), py::arg("labels"), py::arg("num_classes"))
      .def_property_readonly("pixels",
                             [](const sk::Dataset& d) {
                               return to_array(d.pixels, {d.size(), d.image_shape[0], d.image_shape[1],
                                                          d.image_shape[2]});
                             })
      .def_readonly("labels", &sk::Dataset::labels)
      .def_readonly("image_shape", &sk::Dataset::image_shape)
      .def_readonly("class_names", &sk::Dataset::class_names)
      .def_property_readonly("num_classes", &sk::Dataset::num_classes)
      .def("__len__", &sk::Dataset::size)
      .def("indices_of_class", &sk::Dataset::indices_of_class)
      .def("subset", [](const sk::Dataset& d, const std::vector<std::size_t>& idx) { return d.subset(idx); })
      .def("save", [](const sk::Dataset& d, const std::filesystem::path& dir) { sk::save_dataset(d, dir); });

  m.def("load_dataset", &sk::load_dataset, py::arg("dir"));
  m.def(
      "synth_dataset",
      [](std::size_t num_classes, std::size_t per_class, std::vector<std::size_t> shape, std::uint64_t seed,
         double noise_sigma, double contrast, double jitter) {
        sk::SynthOptions o;
        o.num_classes = num_classes;
        o.per_class = per_class;
        o.shape = std::move(shape);
        o.seed = seed;
        o.noise_sigma = noise_sigma;
        o.contrast = contrast;
        o.jitter = jitter;
        return sk::synth_dataset(o);
      },
      py::arg("num_classes") = sk::SynthOptions{}.num_classes, py::arg("per_class") = sk::SynthOptions{}.per_class,
      py::arg("shape") = sk::SynthOptions{}.shape, py::arg("seed") = 0,
      py::arg("noise_sigma") = sk::SynthOptions{}.noise_sigma, py::arg("contrast") = sk::SynthOptions{}.contrast,
      py::arg("jitter") = sk::SynthOptions{}.jitter);

  py::class_<sk::Model>(m, "Model")
      .def(py::init([](const std::string& arch, std::vector<std::size_t> input_shape, std::size_t num_classes,
                       std::uint64_t seed) {
             return sk::Model(sk::architecture_by_name(arch, num_classes), std::move(input_shape), num_classes, seed);
           }),
           py::arg("arch"), py::arg("input_shape"), py::arg("num_classes"), py::arg("seed") = 0)
      .def_property_readonly("arch", [](const sk::Model& mdl) { return mdl.architecture().name; })
      .def_property_readonly("num_classes", &sk::Model::num_classes)
      .def_property_readonly("input_shape", &sk::Model::input_shape)
      .def("param_count", &sk::Model::param_count)
      .def("logits",
           [](const sk::Model& mdl, const Array& batch) {
             sk::NoGradGuard guard;
             const sk::Tensor out = mdl.forward(to_tensor(batch));
             return to_array(out.data(), out.shape());
           })
      .def("predict", [](const sk::Model& mdl, const Array& batch) { return sk::predict(mdl, to_tensor(batch)); })
      .def("save", [](const sk::Model& mdl, const std::filesystem::path& p) { sk::save_model(mdl, p); });
  m.def("load_model", &sk::load_model, py::arg("path"));

  m.def(
      "train",
      [](const std::string& arch, const sk::Dataset& data, const std::string& params_json) {
        const sk::TrainParams p = sk::train_params_from_json(params_json);
        py::gil_scoped_release release;
        return sk::train(sk::architecture_by_name(arch, data.num_classes()), data, p).model;
      },
      py::arg("arch"), py::arg("data"), py::arg("params_json") = "{}");

  py::class_<sk::TriggerSpec>(m, "Trigger")
      .def_property_readonly("mode", [](const sk::TriggerSpec& t) { return sk::to_string(t.mode); })
      .def_readonly("epsilon", &sk::TriggerSpec::epsilon)
      .def_property_readonly("delta", [](const sk::TriggerSpec& t) { return to_array(t.delta, t.shape); })
      .def("apply",
           [](const sk::TriggerSpec& t, const sk::Dataset& d, std::uint64_t seed) {
             return sk::apply_trigger(d, t, seed);
           },
           py::arg("data"), py::arg("seed") = 0)
      .def("save", [](const sk::TriggerSpec& t, const std::filesystem::path& p) { sk::save_trigger(t, p); });
  m.def("load_trigger", &sk::load_trigger, py::arg("path"));
  m.def("additive_trigger", &sk::additive_trigger, py::arg("image_shape"), py::arg("epsilon") = 16.0 / 255.0);
  m.def(
      "craft_trigger",
      [](const sk::Model& surrogate, const sk::Dataset& source, int ls, int lt, const sk::TriggerSpec& initial,
         std::size_t steps, std::size_t max_samples, std::uint64_t seed) {
        sk::TriggerCraftParams p;
        p.steps = steps;
        p.max_samples = max_samples;
        py::gil_scoped_release release;
        auto crafted = sk::craft_trigger(surrogate, source, ls, lt, initial, p, seed);
        return std::make_pair(std::move(crafted.spec), std::move(crafted.loss_trace));
      },
      py::arg("surrogate"), py::arg("source_samples"), py::arg("source_label"), py::arg("target_label"),
      py::arg("initial"), py::arg("steps") = 500, py::arg("max_samples") = 256, py::arg("seed") = 0);

  m.def(
      "evaluate",
      [](const sk::Model& mdl, const sk::Dataset& test, const sk::TriggerSpec& t, int ls, int lt,
         std::uint64_t seed) { return eval_dict(sk::evaluate(mdl, test, t, ls, lt, seed)); },
      py::arg("model"), py::arg("test"), py::arg("trigger"), py::arg("source_label"), py::arg("target_label"),
      py::arg("seed") = 0);

  m.def(
      "cosine_alignment",
      [](const Array& g, const Array& c) {
        return sk::cosine_alignment(to_tensor(g), to_tensor(c)).item();
      },
      py::arg("g"), py::arg("c"));

  m.def(
      "normalize_config", [](const std::string& text) { return sk::config_to_json(sk::config_from_json(text)); },
      py::arg("config_json"));
  m.def(
      "run_experiment",
      [](const std::string& config_json, const std::filesystem::path& out_dir) {
        const sk::ExperimentConfig c = sk::config_from_json(config_json);
        py::gil_scoped_release release;
        return sk::run_experiment(c, out_dir).json;
      },
      py::arg("config_json"), py::arg("out_dir"));
  m.def(
      "report_render",
      [](const std::string& report, const std::string& format) {
        return sk::report_render(report, sk::report_format_from_string(format));
      },
      py::arg("report_json"), py::arg("format") = "markdown");
  m.def("strip_timing", &sk::strip_timing, py::arg("report_json"));
  m.def(
      "sha256_hex",
      [](const py::bytes& b) {
        const std::string s = b;
        return sk::sha256_hex({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
      },
      py::arg("data"));
}
