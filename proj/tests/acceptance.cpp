// Acceptance gate: eight standalone criteria, one pass/fail line each.
// Run with no arguments for the full gate or with a label (c1..c8) for a
// single criterion. Exit 0 only when every requested criterion passes.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "gconv/diagnostics.hpp"
#include "gconv/layers.hpp"
#include "gconv/metrics.hpp"
#include "gconv/models.hpp"
#include "gconv/rng.hpp"
#include "gconv/train.hpp"

using namespace gconv;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// c1: generator conv-weight counts at 32x32, exact and within 1% of the
// rounded reference values.
Outcome c1_param_audit() {
  const size_t conv =
      count_weights(make_arch(32, Role::generator, ConvKind::conv), CountPolicy::conv_only)
          .conv_weights;
  const size_t gconv =
      count_weights(make_arch(32, Role::generator, ConvKind::gconv), CountPolicy::conv_only)
          .conv_weights;
  const bool exact = conv == 3'545'856 && gconv == 4'381'440;
  const bool near = std::abs(double(conv) - 3.54e6) / 3.54e6 <= 0.01 &&
                    std::abs(double(gconv) - 4.37e6) / 4.37e6 <= 0.01;
  return {exact && near,
          fmt("conv=%zu gconv=%zu (want 3545856/4381440, both within 1%% of 3.54M/4.37M)", conv,
              gconv)};
}

// c2: fused vs direct paths agree to 1e-9 over at least 100 seeded shapes.
Outcome c2_equivalence() {
  const auto cases = equivalence_suite(1, 120);
  double worst = 0.0;
  int bad = 0;
  for (const CheckCase& c : cases) {
    worst = std::max(worst, c.value);
    if (c.value >= kEquivTolerance || (c.exact && c.value != 0.0)) ++bad;
  }
  return {cases.size() >= 100 && bad == 0,
          fmt("%zu configurations, worst deviation %.3e (tolerance %.0e), %d failures",
              cases.size(), worst, kEquivTolerance, bad)};
}

// c3: every layer family passes finite-difference gradient checks.
Outcome c3_gradients() {
  const auto cases = gradcheck_suite(1, 20, false);
  double worst = 0.0;
  int bad = 0;
  std::string first;
  for (const CheckCase& c : cases) {
    worst = std::max(worst, c.value);
    if (c.value >= kGradTolerance) {
      ++bad;
      if (first.empty()) first = c.name;
    }
  }
  std::string detail = fmt("%zu cases, worst rel err %.3e (tolerance %.0e), %d failures",
                           cases.size(), worst, kGradTolerance, bad);
  if (bad > 0) detail += " first=" + first;
  return {bad == 0, detail};
}

// c4: the mode-coverage experiment. Gated runs must cover all 8 modes with
// high_quality_ratio >= 0.8 in at least 4 of 5 seeds, and the plain baseline
// must cover strictly fewer modes on average over the same seeds.
Outcome c4_mode_coverage() {
  const std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  const GmmSpec data;
  int gconv_hits = 0;
  double sum_conv = 0.0, sum_gconv = 0.0;
  std::string table;
  for (uint64_t seed : seeds) {
    for (ConvKind kind : {ConvKind::conv, ConvKind::gconv}) {
      TrainConfig cfg = toy_defaults();
      cfg.kind = kind;
      cfg.seed = seed;
      ToyGan gan(kind, cfg.d_z, seed);
      const TrainResult r = train_gan(gan, cfg, data);
      std::fprintf(stderr, "  %s seed %llu: covered %d/8 hq %.3f\n", to_string(kind),
                   (unsigned long long)seed, r.report.covered, r.report.high_quality_ratio);
      if (kind == ConvKind::gconv) {
        sum_gconv += r.report.covered;
        if (r.report.covered == 8 && r.report.high_quality_ratio >= 0.8) ++gconv_hits;
      } else {
        sum_conv += r.report.covered;
      }
      table += fmt("%s/%llu:%d ", to_string(kind), (unsigned long long)seed, r.report.covered);
    }
  }
  const double mean_conv = sum_conv / double(seeds.size());
  const double mean_gconv = sum_gconv / double(seeds.size());
  const bool pass = gconv_hits >= 4 && mean_conv < mean_gconv;
  return {pass, fmt("gconv full-coverage seeds %d/5 (need >=4), mean modes conv %.1f vs "
                    "gconv %.1f (need conv < gconv) [%s]",
                    gconv_hits, mean_conv, mean_gconv, table.c_str())};
}

// c5: metric formulas against hand-evaluated values and the diagonal
// closed form.
Outcome c5_metric_formulas() {
  GaussianStats a;
  a.d = 2;
  a.mu = {1.0, -2.0};
  a.C = {0.5, 0.1, 0.1, 0.8};
  GaussianStats b = a;
  double err = std::abs(frechet_distance(a, a) - 0.0);
  b.mu = {6.0, -2.0};  // mean shift of 5 in one coordinate
  err = std::max(err, std::abs(frechet_distance(a, b) - 25.0));
  GaussianStats p, q;
  p.d = q.d = 2;
  p.mu = q.mu = {0.0, 0.0};
  p.C = {4.0, 0.0, 0.0, 4.0};
  q.C = {1.0, 0.0, 0.0, 1.0};
  err = std::max(err, std::abs(frechet_distance(p, q) - 2.0));
  const bool frechet_ok = err < 1e-9;

  ProbMatrix uniform{3, 5, std::vector<double>(15, 0.2)};
  double is_err = std::abs(inception_score(uniform) - 1.0);
  ProbMatrix onehot{4, 4, std::vector<double>(16, 0.0)};
  for (int i = 0; i < 4; ++i) onehot.p[size_t(i) * 4 + i] = 1.0;
  is_err = std::max(is_err, std::abs(inception_score(onehot) - 4.0));
  ProbMatrix mixed{2, 2, {1.0, 0.0, 0.5, 0.5}};
  const double want =
      std::exp((std::log(4.0 / 3.0) + 0.5 * std::log(2.0 / 3.0) + 0.5 * std::log(2.0)) / 2.0);
  is_err = std::max(is_err, std::abs(inception_score(mixed) - want));
  const bool is_ok = is_err < 1e-6;

  // diagonal covariances commute, so the distance reduces to
  // sum (sqrt(lp) - sqrt(lq))^2 + |mu_p - mu_q|^2
  Rng rng(99);
  double diag_err = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const int d = 2 + rep % 5;
    GaussianStats s, t;
    s.d = t.d = d;
    s.mu.resize(d);
    t.mu.resize(d);
    rng.fill_normal(s.mu.data(), d);
    rng.fill_normal(t.mu.data(), d);
    s.C.assign(size_t(d) * d, 0.0);
    t.C.assign(size_t(d) * d, 0.0);
    double closed = 0.0;
    for (int i = 0; i < d; ++i) {
      const double lp = 0.1 + 3.0 * rng.uniform();
      const double lq = 0.1 + 3.0 * rng.uniform();
      s.C[size_t(i) * d + i] = lp;
      t.C[size_t(i) * d + i] = lq;
      const double ds = std::sqrt(lp) - std::sqrt(lq);
      const double dm = s.mu[i] - t.mu[i];
      closed += ds * ds + dm * dm;
    }
    diag_err = std::max(diag_err, std::abs(frechet_distance(s, t) - closed));
  }
  const bool diag_ok = diag_err < 1e-10;

  return {frechet_ok && is_ok && diag_ok,
          fmt("frechet analytic err %.2e (<1e-9), score err %.2e (<1e-6), "
              "diagonal identity err %.2e over 100 cases (<1e-10)",
              err, is_err, diag_err)};
}

// c6: zeroed recombination degrades the gated layer to the plain one
// exactly, and a live gated layer actually reacts to the latent while the
// plain layer cannot.
Outcome c6_degradation_sensitivity() {
  Rng rng(17);
  const int b = 3, m = 4, n = 5, h = 6, w = 6, dz = 3;
  GConv2d g("g", 3, 3, m, n, dz, &rng);
  Conv2dLayer plain("p", 3, 3, m, n, nullptr);
  plain.K.value = g.K.value;
  plain.b.value = g.b.value;

  // identical input for every sample in the batch; only z distinguishes them
  Tensor X({b, h, w, m});
  Tensor row({1, h, w, m});
  rng.fill_normal(row.ptr(), row.size());
  for (int i = 0; i < b; ++i)
    std::copy(row.data->begin(), row.data->end(),
              X.data->begin() + ptrdiff_t(i) * h * w * m);
  Tensor z({b, dz});
  rng.fill_normal(z.ptr(), z.size());

  GConv2d zeroed = g;
  zeroed.WL.value = Tensor(g.WL.value.shape);  // fresh buffer: g keeps its weights
  const Tensor want = plain.forward(nullptr, X);
  const Tensor fused = zeroed.forward(nullptr, X, z);
  const Tensor direct = zeroed.forward_direct(nullptr, X, z);
  bool degrade_exact = true;
  for (size_t i = 0; i < want.size(); ++i) {
    degrade_exact = degrade_exact && fused[i] == want[i];
    degrade_exact = degrade_exact && direct[i] == want[i];
  }

  const auto slices_equal = [&](const Tensor& Y, int i, int j) {
    const size_t stride = Y.size() / size_t(b);
    return std::memcmp(Y.ptr() + size_t(i) * stride, Y.ptr() + size_t(j) * stride,
                       stride * sizeof(double)) == 0;
  };
  const Tensor gated = g.forward(nullptr, X, z);
  const Tensor flat = plain.forward(nullptr, X);
  bool gated_distinct = true, plain_identical = true;
  for (int i = 0; i < b; ++i)
    for (int j = i + 1; j < b; ++j) {
      gated_distinct = gated_distinct && !slices_equal(gated, i, j);
      plain_identical = plain_identical && slices_equal(flat, i, j);
    }

  return {degrade_exact && gated_distinct && plain_identical,
          fmt("zero recombination exact on both paths: %s; gated slices distinct: %s; "
              "plain slices identical: %s",
              degrade_exact ? "yes" : "NO", gated_distinct ? "yes" : "NO",
              plain_identical ? "yes" : "NO")};
}

// c7: loss values, the hinge generator gradient, and the Adam recurrence.
Outcome c7_loss_optimizer() {
  double err = 0.0;
  const auto scalar = [](const Tensor& t) { return t[0]; };

  Tensor ones({4}, std::vector<double>(4, 1.0));
  Tensor neg_ones({4}, std::vector<double>(4, -1.0));
  Tensor zeros4({4});
  err = std::max(err, std::abs(scalar(loss_d(ones, neg_ones, LossKind::hinge))));
  err = std::max(err, std::abs(scalar(loss_d(zeros4, zeros4, LossKind::hinge)) - 2.0));
  err = std::max(err, std::abs(scalar(loss_d(zeros4, zeros4, LossKind::cross_entropy)) -
                               2.0 * std::log(2.0)));
  Tensor c_const({4}, std::vector<double>(4, 0.37));
  err = std::max(err, std::abs(scalar(loss_g(c_const, LossKind::hinge)) + 0.37));
  err = std::max(err, std::abs(scalar(loss_g(ones, LossKind::lsgan))));
  err = std::max(err,
                 std::abs(scalar(loss_g(zeros4, LossKind::cross_entropy)) - std::log(2.0)));
  const bool losses_ok = err < 1e-12;

  // hinge generator loss differentiates to exactly -1/b per score
  Param f("f", Tensor({4}, {0.3, -1.2, 0.0, 2.5}));
  Tape tape;
  Tensor lg = loss_g(f.on(&tape), LossKind::hinge);
  tape.backward(lg);
  f.collect(tape);
  bool grad_ok = true;
  for (double gv : f.grad) grad_ok = grad_ok && gv == -0.25;

  Param p0("p", Tensor({3}, {1.0, -2.0, 0.5}));
  p0.grad.assign(3, 0.0);
  Adam a0(0.1);
  a0.step({&p0});
  const bool zero_ok =
      a0.t == 1 && p0.value[0] == 1.0 && p0.value[1] == -2.0 && p0.value[2] == 0.5;

  Param p1("p", Tensor({1}, {2.0}));
  p1.grad.assign(1, 4.0);
  Adam a1(0.1);
  a1.step({&p1});
  const double first_err = std::abs(p1.value[0] - (2.0 - 0.1 * 4.0 / (4.0 + 1e-8)));

  // three steps on x^2 against a hand-rolled trace of the same recurrence
  Param x("x", Tensor({1}, {0.7}));
  Adam opt(0.05);
  for (int step = 0; step < 3; ++step) {
    Tape t;
    Tensor xt = x.on(&t);
    t.backward(mul(xt, xt));
    x.collect(t);
    opt.step({&x});
  }
  double xv = 0.7, v = 0.0;
  for (int step = 1; step <= 3; ++step) {
    const double g = 2.0 * xv;
    v = 0.9 * v + 0.1 * g * g;
    const double vh = v / (1.0 - std::pow(0.9, step));
    xv -= 0.05 * g / (std::sqrt(vh) + 1e-8);
  }
  const double trace_err = std::abs(x.value[0] - xv);

  const bool pass =
      losses_ok && grad_ok && zero_ok && first_err < 1e-15 && trace_err < 1e-12;
  return {pass, fmt("loss examples err %.2e; hinge grad exact: %s; zero-grad step exact: %s; "
                    "first-step err %.2e; 3-step trace err %.2e (<1e-12)",
                    err, grad_ok ? "yes" : "NO", zero_ok ? "yes" : "NO", first_err, trace_err)};
}

// c8: after 50 power iterations the normalized matrix has unit spectral
// norm, measured by an independent eigensolver on W^T W.
Outcome c8_spectral_norm() {
  const auto sigma_max = [](const Tensor& W, int rows, int cols) {
    std::vector<double> gram(size_t(cols) * cols, 0.0);
    for (int i = 0; i < cols; ++i)
      for (int j = 0; j < cols; ++j) {
        double s = 0.0;
        for (int r = 0; r < rows; ++r) s += W[size_t(r) * cols + i] * W[size_t(r) * cols + j];
        gram[size_t(i) * cols + j] = s;
      }
    std::vector<double> w, V;
    jacobi_eigh(gram, cols, w, V);
    double top = 0.0;
    for (double lam : w) top = std::max(top, lam);
    return std::sqrt(top);
  };

  Rng rng(4242);
  double worst = 0.0;
  for (const auto [rows, cols] : {std::pair{4, 3}, std::pair{64, 32}}) {
    Param W("w", Tensor({rows, cols}));
    rng.fill_normal(W.value.ptr(), W.value.size());
    SpectralNorm sn;
    sn.init(rows, cols, &rng);
    const Tensor normed = sn.normalized(nullptr, W, rows, cols, 50);
    worst = std::max(worst, std::abs(sigma_max(normed, rows, cols) - 1.0));
  }
  return {worst < 1e-6, fmt("max |sigma - 1| = %.3e over 4x3 and 64x32 (tolerance 1e-6)", worst)};
}

struct Criterion {
  const char* label;
  const char* title;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {"c1", "parameter audit", c1_param_audit},
      {"c2", "fused/direct equivalence", c2_equivalence},
      {"c3", "gradient checks", c3_gradients},
      {"c4", "mode-coverage experiment", c4_mode_coverage},
      {"c5", "metric formulas", c5_metric_formulas},
      {"c6", "degradation and latent sensitivity", c6_degradation_sensitivity},
      {"c7", "losses and optimizer", c7_loss_optimizer},
      {"c8", "spectral normalization", c8_spectral_norm},
  };
  return all;
}

bool run_one(const Criterion& c) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = c.run();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%s %s (%.1fs) %s: %s\n", c.label, o.pass ? "PASS" : "FAIL", secs, c.title,
              o.detail.c_str());
  std::fflush(stdout);
  return o.pass;
}

}  // namespace

int main(int argc, char** argv) {
  bool all_pass = true;
  bool matched = false;
  for (const Criterion& c : criteria()) {
    if (argc > 1 && std::strcmp(argv[1], c.label) != 0) continue;
    matched = true;
    all_pass = run_one(c) && all_pass;
  }
  if (!matched) {
    std::fprintf(stderr, "unknown criterion '%s' (expected c1..c8)\n", argv[1]);
    return 2;
  }
  return all_pass ? 0 : 1;
}
