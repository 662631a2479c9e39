#include "gconv/layers.hpp"

#include <cmath>
#include <cstring>

namespace gconv {

// --- orthogonal init ----------------------------------------------------------

namespace {

// Thin Q of a Householder QR, r >= c, with the sign of each column fixed by
// the corresponding R diagonal. Works on a column-major copy so every
// reflector sweep touches contiguous memory; columns of A arrive as rows of
// the input buffer's transpose and leave the same way.
std::vector<double> thin_q(const std::vector<double>& A_cm, int r, int c) {
  std::vector<double> A = A_cm;                // column-major, A[j*r + i]
  std::vector<double> V(size_t(r) * c, 0.0);   // reflector j lives in V[j*r + j..]
  std::vector<double> vtvs(c, 0.0), diag(c, 0.0);
  for (int j = 0; j < c; ++j) {
    double* col = &A[size_t(j) * r];
    double sigma = 0.0;
    for (int i = j; i < r; ++i) sigma += col[i] * col[i];
    sigma = std::sqrt(sigma);
    if (sigma == 0.0) continue;
    const double alpha = col[j] >= 0.0 ? -sigma : sigma;
    double* v = &V[size_t(j) * r];
    v[j] = col[j] - alpha;
    for (int i = j + 1; i < r; ++i) v[i] = col[i];
    double vtv = 0.0;
    for (int i = j; i < r; ++i) vtv += v[i] * v[i];
    vtvs[j] = vtv;
    if (vtv > 0.0) {
      for (int k = j; k < c; ++k) {
        double* ck = &A[size_t(k) * r];
        double s = 0.0;
        for (int i = j; i < r; ++i) s += v[i] * ck[i];
        const double f = 2.0 * s / vtv;
        for (int i = j; i < r; ++i) ck[i] -= f * v[i];
      }
    }
    diag[j] = A[size_t(j) * r + j];
  }
  // Q = H_0 ... H_{c-1} applied to the thin identity, still column-major.
  std::vector<double> Q(size_t(r) * c, 0.0);
  for (int j = 0; j < c; ++j) Q[size_t(j) * r + j] = 1.0;
  for (int j = c - 1; j >= 0; --j) {
    if (vtvs[j] == 0.0) continue;
    const double* v = &V[size_t(j) * r];
    for (int k = 0; k < c; ++k) {
      double* ck = &Q[size_t(k) * r];
      double s = 0.0;
      for (int i = j; i < r; ++i) s += v[i] * ck[i];
      const double f = 2.0 * s / vtvs[j];
      for (int i = j; i < r; ++i) ck[i] -= f * v[i];
    }
  }
  for (int j = 0; j < c; ++j)
    if (diag[j] < 0.0) {
      double* cj = &Q[size_t(j) * r];
      for (int i = 0; i < r; ++i) cj[i] = -cj[i];
    }
  return Q;
}

}  // namespace

void orthogonal_fill(double* W, int rows, int cols, Rng* rng) {
  if (rng == nullptr) {
    std::memset(W, 0, sizeof(double) * size_t(rows) * cols);
    return;
  }
  const int r = std::max(rows, cols), c = std::min(rows, cols);
  std::vector<double> A(size_t(r) * c);
  rng->fill_normal(A.data(), A.size());
  std::vector<double> Q = thin_q(A, r, c);  // column-major [r, c]
  if (rows >= cols) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) W[size_t(i) * cols + j] = Q[size_t(j) * rows + i];
  } else {
    // Orthonormal rows: the transpose of the tall Q, which column-major
    // already stores row-contiguously.
    std::memcpy(W, Q.data(), sizeof(double) * Q.size());
  }
}

Param orthogonal_param(const std::string& name, std::vector<int> shape, int rows, int cols,
                       Rng* rng) {
  Tensor v(shape);
  if (numel(shape) != size_t(rows) * cols)
    throw ShapeError("orthogonal_param: shape " + shape_str(shape) + " is not " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  orthogonal_fill(v.ptr(), rows, cols, rng);
  return Param(name, std::move(v));
}

// --- dense ----------------------------------------------------------------------

Dense::Dense(const std::string& name, int in_, int out_, Rng* rng, bool bias)
    : in(in_), out(out_), use_bias(bias) {
  W = orthogonal_param(name + ".W", {in, out}, in, out, rng);
  if (use_bias) b = Param(name + ".b", Tensor({out}));
}

Tensor Dense::forward(Tape* t, const Tensor& x) const {
  return forward_with_weight(t, x, W.on(t));
}

Tensor Dense::forward_with_weight(Tape* t, const Tensor& x, const Tensor& weight) const {
  Tensor y = matmul(x, weight);
  if (use_bias) y = add_channel(y, b.on(t));
  return y;
}

void Dense::collect_params(std::vector<Param*>& ps) {
  ps.push_back(&W);
  if (use_bias) ps.push_back(&b);
}

// --- plain convolution ------------------------------------------------------------

Conv2dLayer::Conv2dLayer(const std::string& name, int kh_, int kw_, int m_, int n_, Rng* rng,
                         bool bias)
    : kh(kh_), kw(kw_), m(m_), n(n_), use_bias(bias) {
  K = orthogonal_param(name + ".K", {kh, kw, m, n}, kh * kw * m, n, rng);
  if (use_bias) b = Param(name + ".b", Tensor({n}));
}

Tensor Conv2dLayer::forward(Tape* t, const Tensor& X) const {
  return forward_with_kernel(t, X, K.on(t));
}

Tensor Conv2dLayer::forward_with_kernel(Tape* t, const Tensor& X, const Tensor& kernel) const {
  Tensor y = conv2d(X, kernel, 1, Padding::same);
  if (use_bias) y = add_channel(y, b.on(t));
  return y;
}

void Conv2dLayer::collect_params(std::vector<Param*>& ps) {
  ps.push_back(&K);
  if (use_bias) ps.push_back(&b);
}

// --- kernel-converting pieces ------------------------------------------------------

Tensor gconv_scaling(const Tensor& x_m, const Tensor& z, const Tensor& Ws) {
  if (x_m.shape.size() != 2 || z.shape.size() != 2 || x_m.shape[0] != z.shape[0])
    throw ShapeError("gconv_scaling: batch dims of " + shape_str(x_m.shape) + " and " +
                     shape_str(z.shape) + " differ");
  return sigmoid(matmul(concat(x_m, z), Ws));
}

Tensor gconv_select(const Tensor& K, const Tensor& S_row) {
  if (K.shape.size() != 2 || S_row.shape.size() != 2 || S_row.shape[0] != 1 ||
      S_row.shape[1] != K.shape[1])
    throw ShapeError("gconv_select: bank " + shape_str(K.shape) + " and row " +
                     shape_str(S_row.shape) + " do not align");
  // Column scaling via the per-sample broadcast: rows of K are "batch" entries
  // sharing the single scaling row.
  const int o = K.shape[0], n = K.shape[1];
  Tensor ones({o, 1}, 1.0);
  // K * (ones * S_row), implemented directly to keep the graph small.
  Tensor grid = matmul(ones, S_row);  // [o, n], constant wrt K
  return mul(K, grid);
}

Tensor gconv_combine(const Tensor& Ktilde, const Tensor& WL) {
  if (WL.shape.size() != 2 || WL.shape[0] != WL.shape[1])
    throw ShapeError("gconv_combine: recombination matrix must be square, got " +
                     shape_str(WL.shape));
  return matmul(Ktilde, WL);
}

// --- gconv ------------------------------------------------------------------------

GConv2d::GConv2d(const std::string& name, int kh_, int kw_, int m_, int n_, int dz_, Rng* rng,
                 bool bias)
    : kh(kh_), kw(kw_), m(m_), n(n_), dz(dz_), use_bias(bias) {
  K = orthogonal_param(name + ".K", {kh, kw, m, n}, kh * kw * m, n, rng);
  Ws = orthogonal_param(name + ".Ws", {m + dz, n}, m + dz, n, rng);
  WL = orthogonal_param(name + ".WL", {n, n}, n, n, rng);
  if (use_bias) b = Param(name + ".b", Tensor({n}));
}

Tensor GConv2d::scaling(Tape* t, const Tensor& X, const Tensor& z) const {
  return gconv_scaling(gap(X), z, Ws.on(t));
}

Tensor GConv2d::forward(Tape* t, const Tensor& X, const Tensor& z) const {
  if (X.shape.size() != 4 || z.shape.size() != 2 || X.shape[0] != z.shape[0])
    throw ShapeError("gconv: input " + shape_str(X.shape) + " and latent " + shape_str(z.shape) +
                     " disagree on batch size");
  Tensor base = conv2d(X, K.on(t), 1, Padding::same);
  Tensor S = scaling(t, X, z);
  Tensor scaled = mul_batch_channel(base, S);
  Tensor wl = reshape(WL.on(t), {1, 1, n, n});
  Tensor second = conv2d(scaled, wl, 1, Padding::same);
  Tensor y = add(base, second);
  if (use_bias) y = add_channel(y, b.on(t));
  return y;
}

Tensor GConv2d::forward_direct(Tape* t, const Tensor& X, const Tensor& z) const {
  if (X.shape.size() != 4 || z.shape.size() != 2 || X.shape[0] != z.shape[0])
    throw ShapeError("gconv: input " + shape_str(X.shape) + " and latent " + shape_str(z.shape) +
                     " disagree on batch size");
  const int b_sz = X.shape[0];
  Tensor base = conv2d(X, K.on(t), 1, Padding::same);
  Tensor S = scaling(t, X, z);
  Tensor kmat = reshape(K.on(t), {kh * kw * m, n});
  std::vector<Tensor> per_sample;
  per_sample.reserve(size_t(b_sz));
  for (int i = 0; i < b_sz; ++i) {
    Tensor ktilde = gconv_select(kmat, slice_row(S, i));
    Tensor khat = gconv_combine(ktilde, WL.on(t));
    Tensor xi = slice_batch(X, i);
    per_sample.push_back(conv2d(xi, reshape(khat, {kh, kw, m, n}), 1, Padding::same));
  }
  Tensor second = concat_batch(per_sample);
  Tensor y = add(base, second);
  if (use_bias) y = add_channel(y, b.on(t));
  return y;
}

void GConv2d::collect_params(std::vector<Param*>& ps) {
  ps.push_back(&K);
  ps.push_back(&Ws);
  ps.push_back(&WL);
  if (use_bias) ps.push_back(&b);
}

GDense::GDense(const std::string& name, int in, int out, int dz, Rng* rng, bool bias)
    : g(name, 1, 1, in, out, dz, rng, bias) {}

Tensor GDense::forward(Tape* t, const Tensor& x, const Tensor& z) const {
  if (x.shape.size() != 2)
    throw ShapeError("gdense: expected rank-2 input, got " + shape_str(x.shape));
  Tensor x4 = reshape(x, {x.shape[0], 1, 1, x.shape[1]});
  Tensor y = g.forward(t, x4, z);
  return reshape(y, {x.shape[0], g.n});
}

void GDense::collect_params(std::vector<Param*>& ps) { g.collect_params(ps); }

// --- spectral normalization ---------------------------------------------------------

namespace {
double vec_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// One power iteration on the raw values; leaves the state untouched when the
// matrix maps it to (numerically) nothing.
void power_iterate(const double* W, int rows, int cols, std::vector<double>& u,
                   std::vector<double>& v) {
  std::vector<double> nv(size_t(cols), 0.0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) nv[size_t(j)] += W[size_t(i) * cols + j] * u[size_t(i)];
  double nrm = vec_norm(nv);
  if (nrm > 1e-290) {
    for (double& x : nv) x /= nrm;
    v = nv;
  }
  std::vector<double> nu(size_t(rows), 0.0);
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += W[size_t(i) * cols + j] * v[size_t(j)];
    nu[size_t(i)] = s;
  }
  nrm = vec_norm(nu);
  if (nrm > 1e-290) {
    for (double& x : nu) x /= nrm;
    u = nu;
  }
}
}  // namespace

Tensor spectral_normalize(const Tensor& W, std::vector<double>& u, std::vector<double>& v,
                          int iters) {
  if (W.shape.size() != 2)
    throw ShapeError("spectral_normalize: expected a matrix, got " + shape_str(W.shape));
  const int rows = W.shape[0], cols = W.shape[1];
  if (u.size() != size_t(rows) || v.size() != size_t(cols))
    throw ValueError("spectral_normalize: state vectors sized " + std::to_string(u.size()) + "/" +
                     std::to_string(v.size()) + " do not fit " + shape_str(W.shape));
  bool nonzero = false;
  for (size_t i = 0; i < W.size(); ++i)
    if (W[i] != 0.0) {
      nonzero = true;
      break;
    }
  if (!nonzero) throw ValueError("spectral_normalize: all-zero matrix");
  for (int it = 0; it < iters; ++it) power_iterate(W.ptr(), rows, cols, u, v);
  // sigma = u^T W v with the state frozen as constants; gradients flow
  // through W via both the numerator and the estimate.
  Tensor ut({1, rows}, u);
  Tensor vt({cols, 1}, v);
  Tensor sigma = matmul(matmul(ut, W), vt);
  return div_scalar(W, sigma);
}

void SpectralNorm::init(int rows, int cols, Rng* rng) {
  if (rng == nullptr) {
    // Deterministic unit vectors; good enough when the weights are audit-only.
    u.assign(size_t(rows), 1.0 / std::sqrt(double(rows)));
    v.assign(size_t(cols), 1.0 / std::sqrt(double(cols)));
    return;
  }
  u.assign(size_t(rows), 0.0);
  v.assign(size_t(cols), 0.0);
  rng->fill_normal(u.data(), u.size());
  rng->fill_normal(v.data(), v.size());
  const double nu = vec_norm(u), nv = vec_norm(v);
  for (double& x : u) x /= nu;
  for (double& x : v) x /= nv;
}

Tensor SpectralNorm::normalized(Tape* t, Param& W, int rows, int cols, int iters) {
  bool nonzero = false;
  for (size_t i = 0; i < W.value.size(); ++i)
    if (W.value[i] != 0.0) {
      nonzero = true;
      break;
    }
  Tensor flat = reshape(W.on(t), {rows, cols});
  if (!nonzero) return flat;  // nothing to normalize; keep the layer usable
  return spectral_normalize(flat, u, v, iters);
}

// --- batch normalization -------------------------------------------------------------

namespace {

// Standardizes X per channel over all leading dims. In train mode the batch
// statistics go through the tape (so gradients flow through mean and
// variance) and the running stats are updated off-tape; in eval mode the
// stored running stats are constants.
Tensor standardize(Tape* t, const Tensor& X, bool train, double momentum, double eps,
                   std::vector<double>& run_mean, std::vector<double>& run_var) {
  const int m = X.shape.back();
  if (train) {
    if (X.shape.front() < 2)
      throw ValueError("batchnorm: train mode requires batch size >= 2, got " +
                       shape_str(X.shape));
    Tensor mu = channel_mean(X);
    Tensor centered = add_channel(X, neg(mu));
    Tensor var = channel_mean(mul(centered, centered));
    Tensor inv = rsqrt_eps(var, eps);
    for (int c = 0; c < m; ++c) {
      run_mean[size_t(c)] = momentum * run_mean[size_t(c)] + (1.0 - momentum) * mu[size_t(c)];
      run_var[size_t(c)] = momentum * run_var[size_t(c)] + (1.0 - momentum) * var[size_t(c)];
    }
    return mul_channel(centered, inv);
  }
  Tensor neg_mean({m});
  Tensor inv({m});
  for (int c = 0; c < m; ++c) {
    neg_mean[size_t(c)] = -run_mean[size_t(c)];
    inv[size_t(c)] = 1.0 / std::sqrt(run_var[size_t(c)] + eps);
  }
  (void)t;
  return mul_channel(add_channel(X, neg_mean), inv);
}

}  // namespace

BatchNorm::BatchNorm(const std::string& name, int m_) : m(m_) {
  gamma = Param(name + ".gamma", Tensor({m}, 1.0));
  beta = Param(name + ".beta", Tensor({m}));
  run_mean.assign(size_t(m), 0.0);
  run_var.assign(size_t(m), 1.0);
}

Tensor BatchNorm::forward(Tape* t, const Tensor& X, bool train) {
  if (X.shape.back() != m)
    throw ShapeError("batchnorm: expected trailing dim " + std::to_string(m) + ", got " +
                     shape_str(X.shape));
  Tensor core = standardize(t, X, train, momentum, eps, run_mean, run_var);
  return add_channel(mul_channel(core, gamma.on(t)), beta.on(t));
}

void BatchNorm::collect_params(std::vector<Param*>& ps) {
  ps.push_back(&gamma);
  ps.push_back(&beta);
}

LatentBatchNorm::LatentBatchNorm(const std::string& name, int m_, int dz_, Rng* rng)
    : m(m_), dz(dz_) {
  Wg = orthogonal_param(name + ".Wg", {dz, m}, dz, m, rng);
  Wb = orthogonal_param(name + ".Wb", {dz, m}, dz, m, rng);
  run_mean.assign(size_t(m), 0.0);
  run_var.assign(size_t(m), 1.0);
}

Tensor LatentBatchNorm::forward(Tape* t, const Tensor& X, const Tensor& z, bool train) {
  if (X.shape.back() != m || z.shape.size() != 2 || z.shape[1] != dz ||
      z.shape[0] != X.shape.front())
    throw ShapeError("latent batchnorm: shapes " + shape_str(X.shape) + " and " +
                     shape_str(z.shape) + " do not fit m=" + std::to_string(m) +
                     ", dz=" + std::to_string(dz));
  Tensor core = standardize(t, X, train, momentum, eps, run_mean, run_var);
  Tensor gamma_b = add_scalar(matmul(z, Wg.on(t)), 1.0);  // [b, m]
  Tensor beta_b = matmul(z, Wb.on(t));
  return add_batch_channel(mul_batch_channel(core, gamma_b), beta_b);
}

void LatentBatchNorm::collect_params(std::vector<Param*>& ps) {
  ps.push_back(&Wg);
  ps.push_back(&Wb);
}

// --- channel gate ---------------------------------------------------------------------

ChannelGate::ChannelGate(const std::string& name, int m_, Rng* rng, int reduction_)
    : m(m_), reduction(reduction_) {
  if (m % reduction)
    throw ShapeError("channel_gate: " + std::to_string(m) + " channels not divisible by " +
                     std::to_string(reduction));
  W1 = orthogonal_param(name + ".W1", {m, m / reduction}, m, m / reduction, rng);
  W2 = orthogonal_param(name + ".W2", {m / reduction, m}, m / reduction, m, rng);
}

Tensor ChannelGate::forward(Tape* t, const Tensor& X) const {
  Tensor s = gap(X);
  Tensor gate = sigmoid(matmul(relu(matmul(s, W1.on(t))),
                               W2.on(t)));
  return mul_batch_channel(X, gate);
}

void ChannelGate::collect_params(std::vector<Param*>& ps) {
  ps.push_back(&W1);
  ps.push_back(&W2);
}

const char* to_string(ConvKind k) { return k == ConvKind::conv ? "conv" : "gconv"; }

ConvKind conv_kind_from(const std::string& s) {
  if (s == "conv") return ConvKind::conv;
  if (s == "gconv") return ConvKind::gconv;
  throw ValueError("unknown layer kind '" + s + "' (expected conv or gconv)");
}

// --- residual blocks --------------------------------------------------------------------

GenResBlock::GenResBlock(const std::string& name, int m_in_, int n_out_, int dz_, ConvKind kind_,
                         bool up_, Rng* rng)
    : m_in(m_in_), n_out(n_out_), dz(dz_), up(up_), kind(kind_) {
  bn1 = LatentBatchNorm(name + ".bn1", m_in, dz, rng);
  bn2 = LatentBatchNorm(name + ".bn2", n_out, dz, rng);
  // bn2 removes any per-channel constant, so a bias on the first conv would
  // be a dead parameter; it is omitted.
  if (kind == ConvKind::conv) {
    c1_conv.emplace(name + ".c1", 3, 3, m_in, n_out, rng, /*bias=*/false);
    c2_conv.emplace(name + ".c2", 3, 3, n_out, n_out, rng);
  } else {
    c1_g.emplace(name + ".c1", 3, 3, m_in, n_out, dz, rng, /*bias=*/false);
    c2_g.emplace(name + ".c2", 3, 3, n_out, n_out, dz, rng);
  }
  has_skip_conv = up || m_in != n_out;
  if (has_skip_conv) skip.emplace(name + ".skip", 1, 1, m_in, n_out, rng, /*bias=*/false);
}

Tensor GenResBlock::forward(Tape* t, const Tensor& X, const Tensor& z, bool train) {
  Tensor h = relu(bn1.forward(t, X, z, train));
  if (up) h = upsample_nearest(h);
  h = kind == ConvKind::conv ? c1_conv->forward(t, h) : c1_g->forward(t, h, z);
  h = relu(bn2.forward(t, h, z, train));
  h = kind == ConvKind::conv ? c2_conv->forward(t, h) : c2_g->forward(t, h, z);
  Tensor s = up ? upsample_nearest(X) : X;
  if (has_skip_conv) s = skip->forward(t, s);
  return add(h, s);
}

void GenResBlock::collect_params(std::vector<Param*>& ps) {
  bn1.collect_params(ps);
  bn2.collect_params(ps);
  if (c1_conv) c1_conv->collect_params(ps);
  if (c2_conv) c2_conv->collect_params(ps);
  if (c1_g) c1_g->collect_params(ps);
  if (c2_g) c2_g->collect_params(ps);
  if (skip) skip->collect_params(ps);
}

DiscResBlock::DiscResBlock(const std::string& name, int m_in_, int n_out_, bool down_, bool first_,
                           Rng* rng)
    : m_in(m_in_), n_out(n_out_), down(down_), first(first_) {
  c1 = Conv2dLayer(name + ".c1", 3, 3, m_in, n_out, rng);
  c2 = Conv2dLayer(name + ".c2", 3, 3, n_out, n_out, rng);
  sn1.init(3 * 3 * m_in, n_out, rng);
  sn2.init(3 * 3 * n_out, n_out, rng);
  has_skip_conv = first || down || m_in != n_out;
  if (has_skip_conv) {
    skip.emplace(name + ".skip", 1, 1, m_in, n_out, rng, /*bias=*/false);
    sn_skip.init(m_in, n_out, rng);
  }
}

Tensor DiscResBlock::forward(Tape* t, const Tensor& X, bool update_estimate) {
  const int it = update_estimate ? 1 : 0;
  Tensor k1 = reshape(sn1.normalized(t, c1.K, 3 * 3 * m_in, n_out, it), {3, 3, m_in, n_out});
  Tensor k2 = reshape(sn2.normalized(t, c2.K, 3 * 3 * n_out, n_out, it), {3, 3, n_out, n_out});
  if (first) {
    Tensor h = c1.forward_with_kernel(t, X, k1);
    h = relu(h);
    h = c2.forward_with_kernel(t, h, k2);
    h = avgpool2(h);
    Tensor s = avgpool2(X);
    Tensor ks = reshape(sn_skip.normalized(t, skip->K, m_in, n_out, it), {1, 1, m_in, n_out});
    s = skip->forward_with_kernel(t, s, ks);
    return add(h, s);
  }
  Tensor h = relu(X);
  h = c1.forward_with_kernel(t, h, k1);
  h = relu(h);
  h = c2.forward_with_kernel(t, h, k2);
  if (down) h = avgpool2(h);
  Tensor s = X;
  if (has_skip_conv) {
    Tensor ks = reshape(sn_skip.normalized(t, skip->K, m_in, n_out, it), {1, 1, m_in, n_out});
    s = skip->forward_with_kernel(t, s, ks);
  }
  if (down) s = avgpool2(s);
  return add(h, s);
}

void DiscResBlock::collect_params(std::vector<Param*>& ps) {
  c1.collect_params(ps);
  c2.collect_params(ps);
  if (skip) skip->collect_params(ps);
}

}  // namespace gconv
