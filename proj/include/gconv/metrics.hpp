#pragma once

#include <vector>

#include "gconv/gmm.hpp"
#include "gconv/tensor.hpp"

namespace gconv {

// Gaussian summary of a sample set: mean and covariance, row-major d x d.
struct GaussianStats {
  int d = 0;
  std::vector<double> mu;
  std::vector<double> C;
};

// Sample mean and unbiased (1/(N-1)) covariance, exactly symmetrized.
// Requires at least two samples.
GaussianStats fit_gaussian_stats(const Tensor& samples);

// ||mu_p - mu_q||^2 + tr(Cp + Cq - 2 (Cp Cq)^{1/2}). The square root goes
// through the symmetric form Cq^{1/2} Cp Cq^{1/2}, whose spectrum matches
// Cp Cq. Eigenvalues below -1e-8 raise a ValueError; tiny negatives are
// clamped to zero, as is a tiny negative total.
double frechet_distance(const GaussianStats& p, const GaussianStats& q);

// Row-stochastic matrix of per-sample class distributions.
struct ProbMatrix {
  int n = 0, l = 0;
  std::vector<double> p;  // row-major [n, l]

  // Rows must be non-negative and sum to 1 within 1e-9.
  void validate() const;
};

// exp of the mean row-wise KL divergence to the column-mean marginal,
// with 0*log(0) taken as 0. Always lands in [1, l].
double inception_score(const ProbMatrix& P);

struct ModeReport {
  int covered = 0;
  std::vector<long> counts;  // samples assigned to each mode (nearest center)
  double high_quality_ratio = 0.0;
};

// Assigns each sample to its nearest mode center. A mode counts as covered
// when at least max(1, N / (modes * 10)) samples fall within
// threshold_multiplier * stddev of its center; high_quality_ratio is the
// fraction of samples within that radius of any center.
ModeReport mode_coverage(const Tensor& samples, const GmmSpec& spec,
                         double threshold_multiplier = 3.0);

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
// A is row-major d x d; fills eigenvalues w (unsorted) and column
// eigenvectors V with A = V diag(w) V^T. Exposed for the metric oracles.
void jacobi_eigh(const std::vector<double>& A, int d, std::vector<double>& w,
                 std::vector<double>& V);

}  // namespace gconv
