#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <vector>

#include "gconv/layers.hpp"
#include "gconv/metrics.hpp"
#include "gconv/models.hpp"

namespace py = pybind11;
using namespace gconv;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a, int want_dims, const char* name) {
  if (a.ndim() != want_dims)
    throw py::value_error(std::string(name) + " must have " + std::to_string(want_dims) +
                          " dimensions, got " + std::to_string(a.ndim()));
  std::vector<int> shape(size_t(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[size_t(i)] = int(a.shape(i));
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.ptr());
  return t;
}

py::array_t<double> from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::copy(t.ptr(), t.ptr() + t.size(), out.mutable_data());
  return out;
}

GConv2d make_gconv(const Array& K, const Array& Ws, const Array& WL,
                   const std::optional<Array>& bias) {
  Tensor k = to_tensor(K, 4, "K");
  GConv2d g;
  g.kh = k.shape[0];
  g.kw = k.shape[1];
  g.m = k.shape[2];
  g.n = k.shape[3];
  g.K = Param("K", std::move(k));
  Tensor ws = to_tensor(Ws, 2, "Ws");
  g.dz = ws.shape[0] - g.m;
  if (g.dz < 1) throw py::value_error("Ws rows must exceed the input channel count");
  g.Ws = Param("Ws", std::move(ws));
  g.WL = Param("WL", to_tensor(WL, 2, "WL"));
  g.use_bias = bias.has_value();
  g.b = Param("b", bias ? to_tensor(*bias, 1, "b") : Tensor({g.n}));
  return g;
}

}  // namespace

PYBIND11_MODULE(_core, mod) {
  mod.doc() = "native core: gated convolution forward paths, metrics, weight counts";
  mod.attr("__version__") = "0.1.0";

  mod.def(
      "conv2d",
      [](const Array& X, const Array& K, const std::optional<Array>& bias) {
        Tensor k = to_tensor(K, 4, "K");
        Conv2dLayer layer;
        layer.kh = k.shape[0];
        layer.kw = k.shape[1];
        layer.m = k.shape[2];
        layer.n = k.shape[3];
        layer.use_bias = bias.has_value();
        layer.K = Param("K", std::move(k));
        layer.b = Param("b", bias ? to_tensor(*bias, 1, "b") : Tensor({layer.n}));
        return from_tensor(layer.forward(nullptr, to_tensor(X, 4, "X")));
      },
      py::arg("x"), py::arg("kernel"), py::arg("bias") = py::none(),
      "Plain same-padded convolution, x layout [b, h, w, m], kernel [kh, kw, m, n].");

  mod.def(
      "gconv2d",
      [](const Array& X, const Array& z, const Array& K, const Array& Ws, const Array& WL,
         const std::optional<Array>& bias, bool fused) {
        const GConv2d g = make_gconv(K, Ws, WL, bias);
        const Tensor x = to_tensor(X, 4, "x");
        const Tensor zt = to_tensor(z, 2, "z");
        return from_tensor(fused ? g.forward(nullptr, x, zt)
                                 : g.forward_direct(nullptr, x, zt));
      },
      py::arg("x"), py::arg("z"), py::arg("kernel"), py::arg("ws"), py::arg("wl"),
      py::arg("bias") = py::none(), py::arg("fused") = true,
      "Latent-gated convolution. fused=False evaluates the per-sample kernel path "
      "instead of the shared-convolution form; the two agree to rounding.");

  mod.def(
      "gconv_scaling",
      [](const Array& x_mean, const Array& z, const Array& Ws) {
        return from_tensor(gconv_scaling(to_tensor(x_mean, 2, "x_mean"), to_tensor(z, 2, "z"),
                                         to_tensor(Ws, 2, "Ws")));
      },
      py::arg("x_mean"), py::arg("z"), py::arg("ws"),
      "Selection weights sigmoid([x_mean, z] @ Ws), one row per sample.");

  mod.def(
      "frechet_distance",
      [](const Array& P, const Array& Q) {
        return frechet_distance(fit_gaussian_stats(to_tensor(P, 2, "P")),
                                fit_gaussian_stats(to_tensor(Q, 2, "Q")));
      },
      py::arg("p"), py::arg("q"),
      "Frechet distance between Gaussian fits of two sample sets [n, d].");

  mod.def(
      "inception_score",
      [](const Array& P) {
        ProbMatrix pm;
        pm.n = int(P.shape(0));
        pm.l = int(P.shape(1));
        pm.p.assign(P.data(), P.data() + P.size());
        pm.validate();
        return inception_score(pm);
      },
      py::arg("p"), "Inception score of a row-stochastic class-probability matrix [n, l].");

  mod.def(
      "mode_coverage",
      [](const Array& samples, int modes, double radius, double stddev,
         double threshold_multiplier) {
        GmmSpec spec;
        spec.modes = modes;
        spec.radius = radius;
        spec.stddev = stddev;
        const ModeReport r =
            mode_coverage(to_tensor(samples, 2, "samples"), spec, threshold_multiplier);
        return py::make_tuple(r.covered, r.high_quality_ratio, r.counts);
      },
      py::arg("samples"), py::arg("modes") = 8, py::arg("radius") = 2.0,
      py::arg("stddev") = 0.02, py::arg("threshold_multiplier") = 3.0,
      "(covered, high_quality_ratio, per-mode counts) for 2D samples against a ring "
      "of Gaussians.");

  mod.def(
      "conv_weight_count",
      [](int resolution, const std::string& kind) {
        const ParamReport r = count_weights(
            make_arch(resolution, Role::generator, conv_kind_from(kind)),
            CountPolicy::conv_only);
        return py::make_tuple(r.conv_weights, r.gconv_extra);
      },
      py::arg("resolution"), py::arg("kind"),
      "(conv weights, gated extra) for the generator at a supported resolution.");
}
