#include "gconv/train.hpp"

#include <cmath>
#include <cstdio>

namespace gconv {

const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::cross_entropy: return "ce";
    case LossKind::hinge: return "hinge";
    case LossKind::lsgan: return "lsgan";
  }
  return "?";
}

LossKind loss_kind_from(const std::string& s) {
  if (s == "ce" || s == "cross_entropy") return LossKind::cross_entropy;
  if (s == "hinge") return LossKind::hinge;
  if (s == "lsgan") return LossKind::lsgan;
  throw ValueError("unknown loss '" + s + "' (expected ce, hinge, or lsgan)");
}

namespace {

void require_scores(const char* who, const Tensor& s) {
  if (s.size() == 0) throw ValueError(std::string(who) + ": empty batch");
}

}  // namespace

Tensor loss_d(const Tensor& r, const Tensor& f, LossKind kind) {
  require_scores("loss_d", r);
  require_scores("loss_d", f);
  switch (kind) {
    case LossKind::hinge:
      return add(mean_all(relu(add_scalar(neg(r), 1.0))), mean_all(relu(add_scalar(f, 1.0))));
    case LossKind::cross_entropy:
      // -mean log sigmoid(r) - mean log(1 - sigmoid(f)), via softplus
      return add(mean_all(softplus(neg(r))), mean_all(softplus(f)));
    case LossKind::lsgan: {
      Tensor dr = add_scalar(r, -1.0);
      return add(scale(mean_all(mul(dr, dr)), 0.5), scale(mean_all(mul(f, f)), 0.5));
    }
  }
  throw ValueError("loss_d: bad kind");
}

Tensor loss_g(const Tensor& f, LossKind kind) {
  require_scores("loss_g", f);
  switch (kind) {
    case LossKind::hinge: return neg(mean_all(f));
    case LossKind::cross_entropy: return mean_all(softplus(neg(f)));
    case LossKind::lsgan: {
      Tensor df = add_scalar(f, -1.0);
      return scale(mean_all(mul(df, df)), 0.5);
    }
  }
  throw ValueError("loss_g: bad kind");
}

void Adam::step(const std::vector<Param*>& params) {
  if (slots.empty() && !params.empty()) {
    slots.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      slots[i].m.assign(params[i]->value.size(), 0.0);
      slots[i].v.assign(params[i]->value.size(), 0.0);
    }
  }
  if (slots.size() != params.size())
    throw ValueError("adam: parameter set changed between steps");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (size_t i = 0; i < params.size(); ++i) {
    Param* p = params[i];
    const size_t n = p->value.size();
    if (slots[i].m.size() != n)
      throw ValueError("adam: parameter '" + p->name + "' changed size");
    if (p->grad.size() != n)
      throw ValueError("adam: parameter '" + p->name + "' has no collected gradient");
    double* m = slots[i].m.data();
    double* v = slots[i].v.data();
    double* w = p->value.ptr();
    const double* g = p->grad.data();
    for (size_t j = 0; j < n; ++j) {
      if (std::isnan(g[j]))
        throw TrainingError("adam: NaN gradient in parameter '" + p->name + "'", t);
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

void TrainConfig::validate() const {
  if (n_dis < 1) throw ValueError("config: n_dis must be >= 1");
  if (!(lr_g > 0.0) || !(lr_d > 0.0)) throw ValueError("config: learning rates must be > 0");
  if (d_z < 1) throw ValueError("config: d_z must be >= 1");
  if (batch_g < 1 || batch_d < 1) throw ValueError("config: batch sizes must be >= 1");
  if (iterations < 0) throw ValueError("config: iterations must be >= 0");
  if (decay_last < 0) throw ValueError("config: decay window must be >= 0");
  if (snapshot_interval < 1) throw ValueError("config: snapshot interval must be >= 1");
  if (eval_samples < 1 || final_samples < 1)
    throw ValueError("config: sample counts must be >= 1");
}

TrainConfig toy_defaults() { return TrainConfig{}; }

TrainConfig ttur_regime() {
  TrainConfig c;
  c.lr_g = 1e-4;
  c.lr_d = 4e-4;
  c.n_dis = 1;
  c.batch_g = 32;
  c.batch_d = 32;
  c.iterations = 300000;
  c.decay_last = 50000;
  return c;
}

TrainConfig cifar_regime() {
  TrainConfig c;
  c.lr_g = 2e-4;
  c.lr_d = 2e-4;
  c.n_dis = 5;
  c.batch_g = 128;
  c.batch_d = 64;
  c.iterations = 50000;
  c.decay_last = 50000;
  return c;
}

std::string TrainHistory::to_csv() const {
  std::string s = "iter,loss_d,loss_g,mode_coverage,high_quality_ratio\n";
  char buf[160];
  for (const HistoryRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%d,%.17g\n", r.iter, r.loss_d, r.loss_g,
                  r.mode_coverage, r.high_quality_ratio);
    s += buf;
  }
  return s;
}

namespace {

Tensor draw_latent(int b, int dz, Rng& rng) {
  Tensor z({b, dz});
  rng.fill_normal(z.ptr(), z.size());
  return z;
}

}  // namespace

TrainResult train_gan(ToyGan& gan, const TrainConfig& cfg, const GmmSpec& data) {
  // Weaker than validate(): lr = 0 passes, so a frozen run stays expressible.
  if (cfg.n_dis < 1) throw ValueError("train: n_dis must be >= 1");
  if (cfg.batch_g < 1 || cfg.batch_d < 1) throw ValueError("train: batch sizes must be >= 1");
  if (cfg.lr_g < 0.0 || cfg.lr_d < 0.0) throw ValueError("train: learning rates must be >= 0");
  if (cfg.iterations < 0) throw ValueError("train: iterations must be >= 0");
  if (cfg.eval_samples < 1 || cfg.final_samples < 1)
    throw ValueError("train: sample counts must be >= 1");

  // Separate streams so evaluation never perturbs the update sequence.
  Rng data_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Rng eval_rng(cfg.seed ^ 0x6a09e667f3bcc909ull);

  Adam opt_g(cfg.lr_g), opt_d(cfg.lr_d);
  std::vector<Param*> gp = gan.gen_params();
  std::vector<Param*> dp = gan.dis_params();

  TrainResult res;
  double last_ld = 0.0, last_lg = 0.0;

  for (long it = 1; it <= cfg.iterations; ++it) {
    double factor = 1.0;
    if (cfg.decay_last > 0) {
      const long into = it - (cfg.iterations - cfg.decay_last);
      if (into > 0) factor = double(cfg.decay_last - into + 1) / double(cfg.decay_last);
    }
    opt_d.lr = cfg.lr_d * factor;
    opt_g.lr = cfg.lr_g * factor;

    for (int k = 0; k < cfg.n_dis; ++k) {
      Tensor real = sample_gmm(data, cfg.batch_d, data_rng);
      Tensor z = draw_latent(cfg.batch_d, cfg.d_z, data_rng);
      Tensor fake = gan.gen.forward(nullptr, z);  // constant for the D update
      Tape tape;
      Tensor sr = gan.dis.forward(&tape, real);
      Tensor sf = gan.dis.forward(&tape, fake);
      Tensor ld = loss_d(sr, sf, cfg.loss);
      last_ld = ld[0];
      if (!std::isfinite(last_ld)) throw TrainingError("train: discriminator loss diverged", it);
      tape.backward(ld);
      for (Param* p : dp) p->collect(tape);
      opt_d.step(dp);
    }

    {
      Tensor z = draw_latent(cfg.batch_g, cfg.d_z, data_rng);
      Tape tape;
      Tensor fake = gan.gen.forward(&tape, z);
      Tensor sf = gan.dis.forward(&tape, fake);
      Tensor lg = loss_g(sf, cfg.loss);
      last_lg = lg[0];
      if (!std::isfinite(last_lg)) throw TrainingError("train: generator loss diverged", it);
      tape.backward(lg);
      for (Param* p : gp) p->collect(tape);
      opt_g.step(gp);
    }

    if ((cfg.snapshot_interval > 0 && it % cfg.snapshot_interval == 0) || it == cfg.iterations) {
      Tensor z = draw_latent(cfg.eval_samples, cfg.d_z, eval_rng);
      Tensor pts = gan.gen.forward(nullptr, z);
      ModeReport rep = mode_coverage(pts, data);
      res.history.rows.push_back({it, last_ld, last_lg, rep.covered, rep.high_quality_ratio});
    }
  }

  Tensor zf = draw_latent(cfg.final_samples, cfg.d_z, eval_rng);
  res.samples = gan.gen.forward(nullptr, zf);
  res.report = mode_coverage(res.samples, data);
  return res;
}

}  // namespace gconv
