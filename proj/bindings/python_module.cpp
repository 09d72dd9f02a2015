#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "capsnet/bench.hpp"
#include "capsnet/gradcheck.hpp"
#include "capsnet/layers.hpp"
#include "capsnet/synthetic.hpp"
#include "capsnet/train.hpp"

namespace py = pybind11;
using namespace capsnet;

namespace {

Tensor tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
  std::vector<real> values(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(values));
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<float> out(shape);
  float* dst = out.mutable_data();
  for (int64_t i = 0; i < t.size(); ++i) dst[i] = static_cast<float>(t.ptr()[i]);
  return out;
}

py::dict report_to_dict(const CostReport& report) {
  py::dict d;
  py::list rows;
  auto row_dict = [](const LayerCost& r) {
    py::dict jr;
    jr["layer"] = r.name;
    jr["params"] = r.params;
    jr["param_bytes"] = r.param_bytes;
    jr["grad_bytes"] = r.grad_bytes;
    jr["optimizer_bytes"] = r.optimizer_bytes;
    jr["activation_bytes_per_sample"] = r.activation_bytes_per_sample;
    jr["forward_flops_per_sample"] = r.forward_flops_per_sample;
    return jr;
  };
  for (const LayerCost& r : report.rows) rows.append(row_dict(r));
  d["rows"] = rows;
  d["total"] = row_dict(report.totals());
  d["fixed_bytes"] = report.fixed_bytes();
  d["activation_bytes_per_sample"] = report.activation_bytes_per_sample();
  d["head_param_mib"] = report.head_param_mib();
  return d;
}

}  // namespace

PYBIND11_MODULE(capsnet, m) {
  m.doc() = "capsule networks with dynamic routing: core operations, cost "
            "accounting and data utilities";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");
  py::register_exception<NumericError>(m, "NumericError");
  py::register_exception<UsageError>(m, "UsageError");

  m.def(
      "softmax",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> a, int axis) {
        Tape tape;
        return array_from_tensor(tape.softmax(tensor_from_array(a), axis));
      },
      py::arg("logits"), py::arg("axis") = -1,
      "numerically stabilized softmax over an axis");

  m.def(
      "squash",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> a) {
        Tape tape;
        return array_from_tensor(tape.squash(tensor_from_array(a)));
      },
      py::arg("vectors"), "norm-bounding capsule nonlinearity over the last axis");

  m.def(
      "route",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> u_hat, int iterations) {
        Tape tape;
        RoutingState state = route_by_agreement(tape, tensor_from_array(u_hat), iterations);
        py::dict d;
        d["b"] = array_from_tensor(state.b);
        d["c"] = array_from_tensor(state.c);
        d["s"] = array_from_tensor(state.s);
        d["v"] = array_from_tensor(state.v);
        return d;
      },
      py::arg("u_hat"), py::arg("iterations") = 3,
      "dynamic routing over prediction vectors [B,N,M,D]; returns the final state");

  m.def(
      "account",
      [](const std::string& config_json) {
        return report_to_dict(account(NetworkConfig::from_json(config_json)));
      },
      py::arg("config_json"), "closed-form cost report for a config (JSON text)");

  m.def(
      "max_batch",
      [](const std::string& config_json, int64_t budget_bytes) {
        return max_batch(account(NetworkConfig::from_json(config_json)), budget_bytes);
      },
      py::arg("config_json"), py::arg("budget_bytes"),
      "largest batch that fits the byte budget");

  m.def(
      "gradcheck",
      [](uint64_t seed, const std::string& layer, int probes) {
        GradCheckOptions opts;
        opts.seed = seed;
        opts.filter = layer;
        opts.probes = probes;
        py::list out;
        for (const GradCheckResult& r : run_gradcheck(opts)) {
          py::dict d;
          d["layer"] = r.layer;
          d["max_rel_err"] = r.max_rel_err;
          d["probes"] = r.probes;
          d["pass"] = r.pass;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 1, py::arg("layer") = "", py::arg("probes") = 24,
      "finite-difference gradient verification per layer");

  m.def(
      "load_idx",
      [](const std::string& images_path, const std::string& labels_path) {
        Dataset ds = load_idx(images_path, labels_path);
        return py::make_tuple(array_from_tensor(ds.images), ds.labels);
      },
      py::arg("images_path"), py::arg("labels_path"),
      "read an IDX image/label pair; returns (images [N,1,H,W] in [0,1], labels)");

  m.def(
      "save_idx",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> images,
         const std::vector<int>& labels, const std::string& images_path,
         const std::string& labels_path) {
        Dataset ds;
        ds.images = tensor_from_array(images);
        ds.labels = labels;
        int max_label = 0;
        for (int l : labels) max_label = std::max(max_label, l);
        ds.class_count = max_label + 1;
        save_idx(ds, images_path, labels_path);
      },
      py::arg("images"), py::arg("labels"), py::arg("images_path"), py::arg("labels_path"),
      "write an IDX image/label pair");

  m.def(
      "make_glyphs",
      [](int n, int classes, int h, int w, uint64_t seed) {
        Dataset ds = make_glyph_dataset(n, classes, h, w, seed);
        return py::make_tuple(array_from_tensor(ds.images), ds.labels);
      },
      py::arg("n"), py::arg("classes") = 10, py::arg("h") = 28, py::arg("w") = 28,
      py::arg("seed") = 1, "synthetic jittered seven-segment glyph dataset");

  m.attr("__version__") = "1.0.0";
}
