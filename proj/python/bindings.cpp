#include <ATen/CPUGeneratorImpl.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "icam/attribution.hpp"
#include "icam/checkpoint.hpp"
#include "icam/errors.hpp"
#include "icam/evalmetrics.hpp"
#include "icam/synthdata.hpp"
#include "icam/tensor_io.hpp"
#include "icam/util.hpp"

namespace py = pybind11;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

FloatArray to_array(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  FloatArray out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), static_cast<std::size_t>(c.numel()) * sizeof(float));
  return out;
}

FloatArray image_array(const icam::Image& im) {
  FloatArray out({im.height, im.width});
  std::copy(im.data.begin(), im.data.end(), out.mutable_data());
  return out;
}

py::array_t<bool> mask_array(const icam::Mask& m) {
  py::array_t<bool> out({m.height, m.width});
  std::transform(m.data.begin(), m.data.end(), out.mutable_data(), [](std::uint8_t v) { return v != 0; });
  return out;
}

std::span<const double> span_of(const DoubleArray& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

py::dict bundle_dict(const icam::attr::TranslationBundle& b) {
  py::dict d;
  d["x"] = to_array(b.x);
  d["y"] = to_array(b.y);
  d["x_rec"] = to_array(b.x_rec);
  d["y_rec"] = to_array(b.y_rec);
  d["v"] = to_array(b.v);
  d["mu"] = to_array(b.mu);
  d["x_cc"] = to_array(b.x_cc);
  d["y_cc"] = to_array(b.y_cc);
  d["m_x"] = to_array(b.m_x);
  d["m_y"] = to_array(b.m_y);
  return d;
}

class Model {
 public:
  explicit Model(const std::string& checkpoint) : loaded_(icam::load_model(checkpoint)) {}

  py::dict translate(const FloatArray& x, const FloatArray& y) {
    return bundle_dict(icam::attr::translate_pair(*loaded_.model, to_tensor(x), to_tensor(y)));
  }

  py::dict attribute(const FloatArray& x, int target_class, int n_samples, std::uint64_t seed, int max_attempts) {
    auto rng = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto s = icam::attr::attribute_single(*loaded_.model, to_tensor(x), target_class, n_samples, rng,
                                                max_attempts);
    py::dict d;
    d["mean"] = to_array(s.mean_map);
    d["var"] = to_array(s.var_map);
    d["class_logits"] = s.class_logits;
    d["regression_values"] = s.regression_values;
    d["attempts"] = s.attempts;
    return d;
  }

  py::list interpolate(const FloatArray& x, const FloatArray& y, int steps) {
    py::list out;
    for (const auto& s : icam::attr::interpolate(*loaded_.model, to_tensor(x), to_tensor(y), steps)) {
      py::dict d;
      d["alpha"] = s.alpha;
      d["image"] = to_array(s.image);
      d["fa_map"] = to_array(s.fa_map);
      d["class_logit"] = s.class_logit;
      d["regression_value"] = s.regression_value;
      out.append(d);
    }
    return out;
  }

  py::tuple predict(const FloatArray& images) {
    torch::NoGradGuard no_grad;
    auto& m = *loaded_.model;
    const auto x = icam::as_batch(to_tensor(images)).to(m.dtype());
    const auto p = m.predict(m.encode_attribute(x, icam::nets::SamplingMode::deterministic));
    return py::make_tuple(to_array(p.class_logit), to_array(p.regression_value));
  }

  std::string config() const { return nlohmann::json(loaded_.model->config()).dump(); }

 private:
  icam::LoadedModel loaded_;
};

}  // namespace

PYBIND11_MODULE(_icam, m) {
  m.doc() = "Synthetic phantoms, feature-attribution translator and evaluation metrics";
  m.attr("__version__") = icam::kVersion;

  static PyObject* error = py::exception<icam::Error>(m, "Error").release().ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const icam::Error& e) {
      PyErr_SetString(error, (std::string(e.code()) + ": " + e.what()).c_str());
    }
  });

  m.def("config_hash", [](const std::string& json_text) { return icam::config_hash(nlohmann::json::parse(json_text)); },
        py::arg("json_text"));

  m.def(
      "generate_sample",
      [](const std::string& config_json, std::uint64_t seed, std::int64_t index) {
        const auto cfg = nlohmann::json::parse(config_json).get<icam::synth::DatasetConfig>();
        const auto s = icam::synth::generate_sample(cfg, seed, index);
        py::dict d;
        d["image"] = image_array(s.image);
        d["gt_diff"] = image_array(s.gt_diff);
        d["tissue_mask"] = mask_array(s.tissue_mask);
        d["lesion_mask"] = mask_array(s.lesion_mask);
        d["class_label"] = s.class_label;
        d["phenotype"] = s.phenotype;
        d["reference_phenotype"] = s.reference_phenotype;
        return d;
      },
      py::arg("config_json") = "{}", py::arg("seed") = 0, py::arg("index") = 0);

  m.def(
      "generate_dataset",
      [](const std::string& config_json, std::uint64_t seed, const std::string& out_dir) {
        const auto cfg = nlohmann::json::parse(config_json).get<icam::synth::DatasetConfig>();
        return static_cast<std::int64_t>(icam::synth::generate_dataset(cfg, seed, out_dir).records.size());
      },
      py::arg("config_json"), py::arg("seed"), py::arg("out_dir"));

  m.def(
      "read_tensor",
      [](const std::string& path) {
        const auto r = icam::read_tensor_file(path);
        std::vector<py::ssize_t> shape(r.dims.begin(), r.dims.end());
        FloatArray out(shape);
        std::copy(r.values.begin(), r.values.end(), out.mutable_data());
        return out;
      },
      py::arg("path"));

  m.def(
      "ncc",
      [](const DoubleArray& a, const DoubleArray& b, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
        return icam::eval::ncc(span_of(a), span_of(b), {mask.data(), static_cast<std::size_t>(mask.size())});
      },
      py::arg("a"), py::arg("b"), py::arg("mask"));
  m.def("pearson", [](const DoubleArray& a, const DoubleArray& b) { return icam::eval::pearson(span_of(a), span_of(b)); });
  m.def("spearman", [](const DoubleArray& a, const DoubleArray& b) { return icam::eval::spearman(span_of(a), span_of(b)); });
  m.def("correlation_p_value", &icam::eval::correlation_p_value, py::arg("r"), py::arg("n"));

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("translate", &Model::translate, py::arg("x"), py::arg("y"))
      .def("attribute", &Model::attribute, py::arg("x"), py::arg("target_class"), py::arg("n_samples") = 32,
           py::arg("seed") = 0, py::arg("max_attempts") = 100)
      .def("interpolate", &Model::interpolate, py::arg("x"), py::arg("y"), py::arg("steps") = 11)
      .def("predict", &Model::predict, py::arg("images"))
      .def_property_readonly("config", &Model::config);
}
