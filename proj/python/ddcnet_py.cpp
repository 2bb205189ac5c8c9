#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <sstream>

#include "ddcnet/cli.hpp"
#include "ddcnet/design.hpp"
#include "ddcnet/erf.hpp"
#include "ddcnet/flow.hpp"
#include "ddcnet/network.hpp"

namespace py = pybind11;
using namespace ddc;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

// (h, w, 2) array -> FlowField; non-finite or huge components are invalid.
FlowField to_field(const F32& a) {
  if (a.ndim() != 3 || a.shape(2) != 2) throw py::value_error("flow must have shape (h, w, 2)");
  FlowField f(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  const float* p = a.data();
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = p[2 * i];
    f.v[i] = p[2 * i + 1];
    f.valid[i] = std::isfinite(f.u[i]) && std::isfinite(f.v[i]) &&
                 std::fabs(f.u[i]) < kUnknownFlowThreshold && std::fabs(f.v[i]) < kUnknownFlowThreshold;
  }
  return f;
}

// Invalid pixels come back as NaN.
py::array_t<float> from_field(const FlowField& f) {
  py::array_t<float> a({f.h, f.w, 2});
  float* p = a.mutable_data();
  for (std::size_t i = 0; i < f.size(); ++i) {
    p[2 * i] = f.valid[i] ? f.u[i] : NAN;
    p[2 * i + 1] = f.valid[i] ? f.v[i] : NAN;
  }
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "ddcnet native core";
  py::register_exception<FlowError>(m, "FlowError", PyExc_ValueError);

  m.def(
      "info",
      [](const std::string& name) {
        const auto net = resolve_network(name);
        py::dict d;
        d["name"] = net.name;
        d["conv_layers"] = net.conv_count();
        d["params"] = param_count(net);
        d["rf"] = theoretical_rf(net);
        d["divisor"] = net.required_divisor();
        return d;
      },
      py::arg("net"), "Parameter count and theoretical receptive field of a named or spec-file network.");

  m.def(
      "erf",
      [](const std::string& name, int size, const std::string& channel) {
        const auto net = resolve_network(name);
        if (size <= 0) size = probe_size_for(net);
        ErfOptions opts;
        opts.output_channel = channel == "v" ? 1 : 0;
        const auto map = compute_erf<double>(net, constant_init_fan_in<double>(net), size, size, {}, opts);
        const auto st = measure_fwhm(map);
        py::array_t<double> grid({map.h, map.w});
        std::copy(map.grid.begin(), map.grid.end(), grid.mutable_data());
        py::dict d;
        d["fwhm_row"] = st.fwhm_row;
        d["fwhm_col"] = st.fwhm_col;
        d["peak"] = st.peak;
        d["gridding_score"] = st.gridding_score;
        return py::make_tuple(grid, d);
      },
      py::arg("net"), py::arg("size") = 0, py::arg("channel") = "u",
      "Constant-init ERF map (normalized to peak 1) and its statistics.");

  m.def(
      "design_depth",
      [](int coverage_px, int filters, int max_depth) {
        DesignCriteria c;
        c.filters = filters;
        c.max_depth = max_depth;
        const auto r = design_depth(c, synthetic_histogram(coverage_px));
        return py::make_tuple(r.chosen_depth, r.csv());
      },
      py::arg("coverage_px"), py::arg("filters") = 4, py::arg("max_depth") = 30,
      "Smallest step-1 depth whose ERF FWHM covers twice the given magnitude.");

  m.def("read_flo", [](const std::string& path) { return from_field(load_flo(path)); }, py::arg("path"));
  m.def(
      "write_flo", [](const std::string& path, const F32& flow) { save_flo(path, to_field(flow)); },
      py::arg("path"), py::arg("flow"));
  m.def(
      "aee", [](const F32& est, const F32& gt) { return aee(to_field(est), to_field(gt)); }, py::arg("est"),
      py::arg("gt"));
  m.def(
      "fl_all", [](const F32& est, const F32& gt) { return fl_all(to_field(est), to_field(gt)); },
      py::arg("est"), py::arg("gt"));
  m.def(
      "flow_to_color",
      [](const F32& flow, std::optional<float> max_mag) {
        const auto img = flow_to_color(to_field(flow), max_mag);
        py::array_t<std::uint8_t> a({img.h, img.w, 3});
        std::copy(img.rgb.begin(), img.rgb.end(), a.mutable_data());
        return a;
      },
      py::arg("flow"), py::arg("max_mag") = py::none());

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a ddcnet subcommand; returns (exit_code, stdout, stderr).");
}
