#include "gconv/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "gconv/layers.hpp"
#include "gconv/rng.hpp"

namespace gconv {

namespace {

Tensor randt(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  rng.fill_normal(t.data->data(), t.data->size());
  return t;
}

// Half-scale inputs for the sigmoid-gated layers. A saturated gate unit
// leaves selection-weight gradients around 1e-6, where central differences
// bottom out above the tolerance no matter the step; keeping pre-activations
// in the responsive range keeps every entry resolvable.
Tensor randt_gated(std::vector<int> shape, Rng& rng) {
  Tensor t = randt(std::move(shape), rng);
  for (double& v : *t.data) v *= 0.5;
  return t;
}

// Scalar readout with fixed random weights; a plain sum would hide
// permutation mistakes.
Tensor wsum(const Tensor& y, const Tensor& w) { return sum_all(mul(y, w)); }

// Readout weights scaled to keep the loss O(1): central differences resolve
// a gradient entry only down to roundoff(loss) / step, so a large loss
// magnitude would drown small-but-real gradient entries.
Tensor loss_weights(std::vector<int> shape, Rng& rng) {
  Tensor w = randt(std::move(shape), rng);
  const double s = 1.0 / std::sqrt(double(w.data->size()));
  for (double& v : *w.data) v *= s;
  return w;
}

std::string case_name(const char* layer, int i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s[%02d]", layer, i);
  return buf;
}

int draw(Rng& rng, int lo, int hi) { return lo + int(rng.integer(uint64_t(hi - lo + 1))); }

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : *t.data) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.data->size(); ++i)
    m = std::max(m, std::abs((*a.data)[i] - (*b.data)[i]));
  return m;
}

}  // namespace

std::vector<CheckCase> gradcheck_suite(uint64_t seed, int cases_per_layer, bool inject_fault) {
  std::vector<CheckCase> out;
  Rng rng(seed);

  const auto run = [&](const char* layer, int i, std::vector<Param*> ps,
                       const std::function<Tensor(Tape&)>& f) {
    out.push_back({case_name(layer, i), grad_check(f, ps)});
  };

  for (int i = 0; i < cases_per_layer; ++i) {
    const int b = draw(rng, 1, 3);
    const int in = draw(rng, 2, 5);
    const int n = draw(rng, 2, 4);
    Dense l("w", in, n, &rng);
    Param x("x", randt({b, in}, rng));
    Tensor w = loss_weights({b, n}, rng);
    run("dense", i, {&l.W, &l.b, &x},
        [&](Tape& t) { return wsum(l.forward(&t, x.on(&t)), w); });
  }

  for (int i = 0; i < cases_per_layer; ++i) {
    const int b = draw(rng, 1, 3);
    const int in = draw(rng, 2, 5);
    const int n = draw(rng, 2, 4);
    const int dz = draw(rng, 2, 4);
    GDense l("w", in, n, dz, &rng);
    Param x("x", randt_gated({b, in}, rng));
    Param z("z", randt_gated({b, dz}, rng));
    Tensor w = loss_weights({b, n}, rng);
    std::vector<Param*> ps{&x, &z};
    l.collect_params(ps);
    run("gdense", i, ps,
        [&](Tape& t) { return wsum(l.forward(&t, x.on(&t), z.on(&t)), w); });
  }

  for (int i = 0; i < cases_per_layer; ++i) {
    const int b = draw(rng, 1, 2);
    const int m = draw(rng, 2, 4);
    const int n = draw(rng, 2, 4);
    const int k = draw(rng, 1, 3);
    const int h = draw(rng, 3, 5);
    const int wd = draw(rng, 3, 5);
    Conv2dLayer l("w", k, k, m, n, &rng);
    Param x("x", randt({b, h, wd, m}, rng));
    Tensor w = loss_weights(l.forward(nullptr, x.value).shape, rng);
    std::vector<Param*> ps{&x};
    l.collect_params(ps);
    run("conv2d", i, ps, [&](Tape& t) { return wsum(l.forward(&t, x.on(&t)), w); });
  }

  for (int pass = 0; pass < 2; ++pass) {
    const bool fused = pass == 0;
    for (int i = 0; i < cases_per_layer; ++i) {
      const int b = draw(rng, 1, 2);
      const int m = draw(rng, 2, 3);
      const int n = draw(rng, 2, 3);
      const int dz = draw(rng, 2, 3);
      const int k = draw(rng, 0, 1) ? 3 : 1;
      const int h = draw(rng, 3, 4);
      const int wd = draw(rng, 3, 4);
      GConv2d l("w", k, k, m, n, dz, &rng);
      Param x("x", randt_gated({b, h, wd, m}, rng));
      Param z("z", randt_gated({b, dz}, rng));
      Tensor w = loss_weights({b, h, wd, n}, rng);
      std::vector<Param*> ps{&x, &z};
      l.collect_params(ps);
      run(fused ? "gconv2d.fused" : "gconv2d.direct", i, ps, [&](Tape& t) {
        Tensor y = fused ? l.forward(&t, x.on(&t), z.on(&t))
                         : l.forward_direct(&t, x.on(&t), z.on(&t));
        return wsum(y, w);
      });
    }
  }

  for (int i = 0; i < cases_per_layer; ++i) {
    const int b = draw(rng, 1, 3);
    const int in = draw(rng, 2, 5);
    const int n = draw(rng, 2, 4);
    Dense l("w", in, n, &rng);
    SpectralNorm sn;
    sn.init(in, n, &rng);
    for (int it = 0; it < 5; ++it) sn.normalized(nullptr, l.W, in, n, 1);
    Param x("x", randt({b, in}, rng));
    Tensor w = loss_weights({b, n}, rng);
    std::vector<Param*> ps{&x};
    l.collect_params(ps);
    run("spectral_dense", i, ps, [&](Tape& t) {
      Tensor nw = sn.normalized(&t, l.W, in, n, 0);
      return wsum(l.forward_with_weight(&t, x.on(&t), nw), w);
    });
  }

  for (int i = 0; i < cases_per_layer; ++i) {
    // two points per channel standardize to roughly +-1 whatever their
    // values, leaving eps-scale input gradients under the difference noise;
    // keep at least four points so the checks measure something real
    const int b = draw(rng, 2, 3);
    const int m = draw(rng, 2, 4);
    const int h = draw(rng, 2, 3);
    const int wd = draw(rng, 2, 3);
    BatchNorm l("w", m);
    Param x("x", randt({b, h, wd, m}, rng));
    Tensor w = loss_weights({b, h, wd, m}, rng);
    std::vector<Param*> ps{&x};
    l.collect_params(ps);
    run("batchnorm", i, ps,
        [&](Tape& t) { return wsum(l.forward(&t, x.on(&t), true), w); });
  }

  for (int i = 0; i < cases_per_layer; ++i) {
    const int b = draw(rng, 2, 3);
    const int m = draw(rng, 2, 4);
    const int dz = draw(rng, 2, 4);
    const int h = draw(rng, 2, 3);
    const int wd = draw(rng, 2, 3);
    LatentBatchNorm l("w", m, dz, &rng);
    Param x("x", randt({b, h, wd, m}, rng));
    Param z("z", randt({b, dz}, rng));
    Tensor w = loss_weights({b, h, wd, m}, rng);
    std::vector<Param*> ps{&x, &z};
    l.collect_params(ps);
    run("latent_batchnorm", i, ps,
        [&](Tape& t) { return wsum(l.forward(&t, x.on(&t), z.on(&t), true), w); });
  }

  for (int i = 0; i < cases_per_layer; ++i) {
    const int b = draw(rng, 1, 2);
    const int m = 2 * draw(rng, 1, 3);
    const int h = draw(rng, 2, 4);
    const int wd = draw(rng, 2, 4);
    ChannelGate l("w", m, &rng, /*reduction=*/2);
    Param x("x", randt({b, h, wd, m}, rng));
    Tensor w = loss_weights({b, h, wd, m}, rng);
    std::vector<Param*> ps{&x};
    l.collect_params(ps);
    run("channel_gate", i, ps, [&](Tape& t) { return wsum(l.forward(&t, x.on(&t)), w); });
  }

  for (int pass = 0; pass < 2; ++pass) {
    const ConvKind kind = pass == 0 ? ConvKind::conv : ConvKind::gconv;
    for (int i = 0; i < cases_per_layer; ++i) {
      const int m = draw(rng, 2, 3);
      const int n = draw(rng, 2, 3);
      const int dz = draw(rng, 2, 3);
      const bool up = i % 2 == 0;
      const int h = draw(rng, 3, 4);
      const int wd = draw(rng, 3, 4);
      GenResBlock l("w", m, n, dz, kind, up, &rng);
      Param x("x", randt_gated({2, h, wd, m}, rng));
      Param z("z", randt_gated({2, dz}, rng));
      Tensor w = loss_weights(l.forward(nullptr, x.value, z.value, true).shape, rng);
      std::vector<Param*> ps{&x, &z};
      l.collect_params(ps);
      run(kind == ConvKind::conv ? "gen_resblock.conv" : "gen_resblock.gconv", i, ps,
          [&](Tape& t) { return wsum(l.forward(&t, x.on(&t), z.on(&t), true), w); });
    }
  }

  for (int i = 0; i < cases_per_layer; ++i) {
    const int b = draw(rng, 1, 2);
    const int m = draw(rng, 2, 4);
    const int n = draw(rng, 2, 4);
    const bool down = i % 2 == 0;
    const bool first = i % 3 == 0;  // the input variant always pools
    const bool pools = down || first;
    const int h = pools ? 2 * draw(rng, 2, 3) : draw(rng, 3, 4);
    const int wd = pools ? 2 * draw(rng, 2, 3) : draw(rng, 3, 4);
    DiscResBlock l("w", m, n, down, first, &rng);
    Param x("x", randt({b, h, wd, m}, rng));
    for (int it = 0; it < 5; ++it) l.forward(nullptr, x.value, true);
    Tensor w = loss_weights(l.forward(nullptr, x.value, false).shape, rng);
    std::vector<Param*> ps{&x};
    l.collect_params(ps);
    run("disc_resblock", i, ps,
        [&](Tape& t) { return wsum(l.forward(&t, x.on(&t), false), w); });
  }

  if (inject_fault) {
    // The recorded gradient belongs to a scaled copy of the function the
    // finite differences probe, so the mismatch is real, not simulated.
    Param p("p", randt({3}, rng));
    int calls = 0;
    out.push_back({"injected-fault", grad_check(
                                         [&](Tape& t) {
                                           Tensor y = sum_all(mul(p.on(&t), p.on(&t)));
                                           return ++calls == 1 ? scale(y, 1.001) : y;
                                         },
                                         {&p})});
  }
  return out;
}

std::vector<CheckCase> equivalence_suite(uint64_t seed, int cases) {
  std::vector<CheckCase> out;
  out.reserve(size_t(cases));
  Rng rng(seed);
  const int batches[3] = {1, 2, 4};
  for (int i = 0; i < cases; ++i) {
    const int b = batches[i % 3];
    const int m = draw(rng, 2, 16);
    const int n = draw(rng, 2, 16);
    const int h = draw(rng, 3, 8);
    const int w = draw(rng, 3, 8);
    const int dz = draw(rng, 2, 8);
    const int k = i % 4 == 3 ? 1 : 3;
    const bool wl0 = i % 10 == 9;
    GConv2d g("eq", k, k, m, n, dz, &rng);
    if (wl0) std::fill(g.WL.value.data->begin(), g.WL.value.data->end(), 0.0);
    Tensor X = randt({b, h, w, m}, rng);
    Tensor z = randt({b, dz}, rng);
    Tensor fused = g.forward(nullptr, X, z);
    Tensor direct = g.forward_direct(nullptr, X, z);
    const double span = std::max(1.0, std::max(max_abs(fused), max_abs(direct)));
    char buf[96];
    std::snprintf(buf, sizeof buf, "b%d m%02d n%02d %dx%d k%d dz%d%s", b, m, n, h, w, k, dz,
                  wl0 ? " wl0" : "");
    out.push_back({buf, max_abs_diff(fused, direct) / span, wl0});
  }
  return out;
}

}  // namespace gconv
