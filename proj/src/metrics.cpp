#include "gconv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace gconv {

void jacobi_eigh(const std::vector<double>& A, int d, std::vector<double>& w,
                 std::vector<double>& V) {
  if (d < 1 || A.size() != size_t(d) * d)
    throw ShapeError("jacobi_eigh: matrix size does not match dimension " + std::to_string(d));
  std::vector<double> M = A;
  V.assign(size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i) V[size_t(i) * d + i] = 1.0;

  auto off_norm = [&]() {
    double s = 0.0;
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) s += M[size_t(i) * d + j] * M[size_t(i) * d + j];
    return std::sqrt(2.0 * s);
  };
  double scale = 0.0;
  for (double x : M) scale = std::max(scale, std::abs(x));
  const double tol = (scale > 0.0 ? scale : 1.0) * 1e-15 * d;

  for (int sweep = 0; sweep < 64 && off_norm() > tol; ++sweep) {
    for (int p = 0; p < d - 1; ++p) {
      for (int q = p + 1; q < d; ++q) {
        const double apq = M[size_t(p) * d + q];
        if (apq == 0.0) continue;
        const double app = M[size_t(p) * d + p];
        const double aqq = M[size_t(q) * d + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < d; ++k) {
          const double mkp = M[size_t(k) * d + p];
          const double mkq = M[size_t(k) * d + q];
          M[size_t(k) * d + p] = c * mkp - s * mkq;
          M[size_t(k) * d + q] = s * mkp + c * mkq;
        }
        for (int k = 0; k < d; ++k) {
          const double mpk = M[size_t(p) * d + k];
          const double mqk = M[size_t(q) * d + k];
          M[size_t(p) * d + k] = c * mpk - s * mqk;
          M[size_t(q) * d + k] = s * mpk + c * mqk;
        }
        for (int k = 0; k < d; ++k) {
          const double vkp = V[size_t(k) * d + p];
          const double vkq = V[size_t(k) * d + q];
          V[size_t(k) * d + p] = c * vkp - s * vkq;
          V[size_t(k) * d + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  w.resize(size_t(d));
  for (int i = 0; i < d; ++i) w[size_t(i)] = M[size_t(i) * d + i];
}

GaussianStats fit_gaussian_stats(const Tensor& samples) {
  if (samples.shape.size() != 2)
    throw ShapeError("fit_gaussian_stats: expected [N, d] samples, got " +
                     shape_str(samples.shape));
  const int n = samples.shape[0], d = samples.shape[1];
  if (n < 2) throw ValueError("fit_gaussian_stats: need at least 2 samples, got " +
                              std::to_string(n));
  GaussianStats g;
  g.d = d;
  g.mu.assign(size_t(d), 0.0);
  g.C.assign(size_t(d) * d, 0.0);
  const double* x = samples.ptr();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) g.mu[size_t(j)] += x[size_t(i) * d + j];
  for (double& m : g.mu) m /= double(n);
  // Upper triangle only, then mirrored: symmetric to the last bit.
  for (int i = 0; i < n; ++i) {
    const double* xi = x + size_t(i) * d;
    for (int a = 0; a < d; ++a) {
      const double da = xi[a] - g.mu[size_t(a)];
      for (int b = a; b < d; ++b) g.C[size_t(a) * d + b] += da * (xi[b] - g.mu[size_t(b)]);
    }
  }
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      g.C[size_t(a) * d + b] /= double(n - 1);
      g.C[size_t(b) * d + a] = g.C[size_t(a) * d + b];
    }
  return g;
}

namespace {

void check_symmetric(const std::vector<double>& C, int d, const char* who) {
  double scale = 1.0;
  for (double x : C) scale = std::max(scale, std::abs(x));
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j)
      if (std::abs(C[size_t(i) * d + j] - C[size_t(j) * d + i]) > 1e-10 * scale)
        throw ValueError(std::string(who) + ": covariance is not symmetric within tolerance");
}

// Eigenvalues of a PSD-by-assumption matrix; below -1e-8 (relative to the
// largest magnitude) is an error, small negatives are clamped to zero.
std::vector<double> psd_eigenvalues(const std::vector<double>& A, int d, std::vector<double>& V,
                                    const char* who) {
  std::vector<double> w;
  jacobi_eigh(A, d, w, V);
  double scale = 0.0;
  for (double x : w) scale = std::max(scale, std::abs(x));
  const double floor = -1e-8 * (scale > 0.0 ? scale : 1.0);
  for (double& x : w) {
    if (x < floor)
      throw ValueError(std::string(who) + ": matrix is not positive semi-definite (eigenvalue " +
                       std::to_string(x) + ")");
    if (x < 0.0) x = 0.0;
  }
  return w;
}

}  // namespace

double frechet_distance(const GaussianStats& p, const GaussianStats& q) {
  if (p.d != q.d || p.mu.size() != size_t(p.d) || q.mu.size() != size_t(q.d) ||
      p.C.size() != size_t(p.d) * p.d || q.C.size() != size_t(q.d) * q.d)
    throw ShapeError("frechet_distance: dimension mismatch (" + std::to_string(p.d) + " vs " +
                     std::to_string(q.d) + ")");
  const int d = p.d;
  check_symmetric(p.C, d, "frechet_distance");
  check_symmetric(q.C, d, "frechet_distance");

  double dist = 0.0;
  for (int i = 0; i < d; ++i) {
    const double dm = p.mu[size_t(i)] - q.mu[size_t(i)];
    dist += dm * dm;
    dist += p.C[size_t(i) * d + i] + q.C[size_t(i) * d + i];
  }

  // S = Cq^{1/2} via eigendecomposition, then the spectrum of S Cp S.
  std::vector<double> Vq;
  std::vector<double> wq = psd_eigenvalues(q.C, d, Vq, "frechet_distance");
  for (double& x : wq) x = std::sqrt(x);
  std::vector<double> S(size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k)
        s += Vq[size_t(i) * d + k] * wq[size_t(k)] * Vq[size_t(j) * d + k];
      S[size_t(i) * d + j] = s;
    }
  std::vector<double> SC(size_t(d) * d, 0.0), M(size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += S[size_t(i) * d + k] * p.C[size_t(k) * d + j];
      SC[size_t(i) * d + j] = s;
    }
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += SC[size_t(i) * d + k] * S[size_t(k) * d + j];
      M[size_t(i) * d + j] = s;
    }
  // Roundoff can leave M slightly asymmetric; fold it back before Jacobi.
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      const double m = 0.5 * (M[size_t(i) * d + j] + M[size_t(j) * d + i]);
      M[size_t(i) * d + j] = m;
      M[size_t(j) * d + i] = m;
    }
  std::vector<double> Vm;
  std::vector<double> wm = psd_eigenvalues(M, d, Vm, "frechet_distance");
  for (double x : wm) dist -= 2.0 * std::sqrt(x);

  return dist < 0.0 ? 0.0 : dist;
}

void ProbMatrix::validate() const {
  if (n < 1 || l < 1)
    throw ValueError("prob_matrix: need at least one row and one class, got " +
                     std::to_string(n) + "x" + std::to_string(l));
  if (p.size() != size_t(n) * l)
    throw ShapeError("prob_matrix: storage does not match " + std::to_string(n) + "x" +
                     std::to_string(l));
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < l; ++j) {
      const double x = p[size_t(i) * l + j];
      if (x < 0.0)
        throw ValueError("prob_matrix: negative entry in row " + std::to_string(i));
      row += x;
    }
    if (std::abs(row - 1.0) > 1e-9)
      throw ValueError("prob_matrix: row " + std::to_string(i) + " sums to " +
                       std::to_string(row));
  }
}

double inception_score(const ProbMatrix& P) {
  P.validate();
  std::vector<double> marginal(size_t(P.l), 0.0);
  for (int i = 0; i < P.n; ++i)
    for (int j = 0; j < P.l; ++j) marginal[size_t(j)] += P.p[size_t(i) * P.l + j];
  for (double& m : marginal) m /= double(P.n);
  double kl = 0.0;
  for (int i = 0; i < P.n; ++i)
    for (int j = 0; j < P.l; ++j) {
      const double x = P.p[size_t(i) * P.l + j];
      if (x > 0.0) kl += x * std::log(x / marginal[size_t(j)]);  // x>0 forces marginal>0
    }
  return std::exp(kl / double(P.n));
}

ModeReport mode_coverage(const Tensor& samples, const GmmSpec& spec,
                         double threshold_multiplier) {
  if (samples.shape.size() != 2 || samples.shape[1] != 2)
    throw ShapeError("mode_coverage: expected [N, 2] samples, got " + shape_str(samples.shape));
  const int n = samples.shape[0];
  if (n < 1) throw ValueError("mode_coverage: empty sample set");
  const Tensor centers = gmm_centers(spec);
  const int modes = spec.modes;
  ModeReport r;
  r.counts.assign(size_t(modes), 0);
  std::vector<long> close(size_t(modes), 0);
  const double radius = threshold_multiplier * spec.stddev;
  const double r2 = radius * radius;
  long hq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = samples[size_t(2 * i)], y = samples[size_t(2 * i + 1)];
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    bool near_any = false;
    for (int k = 0; k < modes; ++k) {
      const double dx = x - centers[size_t(2 * k)], dy = y - centers[size_t(2 * k + 1)];
      const double d2 = dx * dx + dy * dy;
      if (d2 < best_d) {
        best_d = d2;
        best = k;
      }
      if (d2 <= r2) {
        ++close[size_t(k)];
        near_any = true;
      }
    }
    ++r.counts[size_t(best)];
    if (near_any) ++hq;
  }
  const double need = std::max(1.0, double(n) / (double(modes) * 10.0));
  for (int k = 0; k < modes; ++k)
    if (double(close[size_t(k)]) >= need) ++r.covered;
  r.high_quality_ratio = double(hq) / double(n);
  return r;
}

}  // namespace gconv
