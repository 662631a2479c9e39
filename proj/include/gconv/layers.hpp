#pragma once
#include <optional>
#include <string>
#include <vector>

#include "gconv/rng.hpp"
#include "gconv/tensor.hpp"

namespace gconv {

// Orthogonal init, gain 1: orthonormal columns when rows >= cols, orthonormal
// rows otherwise. Used for every 2-D weight (conv kernels flattened to
// [kh*kw*m, n]); biases start at zero. rng == nullptr skips the QR and leaves
// zeros: the cheap path for shape and count audits, where values are unused.
void orthogonal_fill(double* W, int rows, int cols, Rng* rng);
Param orthogonal_param(const std::string& name, std::vector<int> shape, int rows, int cols,
                       Rng* rng);

struct Dense {
  int in = 0, out = 0;
  bool use_bias = true;
  Param W;  // [in, out]
  Param b;  // [out]

  Dense() = default;
  Dense(const std::string& name, int in, int out, Rng* rng, bool bias = true);
  Tensor forward(Tape* t, const Tensor& x) const;
  Tensor forward_with_weight(Tape* t, const Tensor& x, const Tensor& weight) const;
  void collect_params(std::vector<Param*>& ps);
};

struct Conv2dLayer {
  int kh = 0, kw = 0, m = 0, n = 0;
  bool use_bias = true;
  Param K;  // [kh, kw, m, n]
  Param b;  // [n]

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int kh, int kw, int m, int n, Rng* rng, bool bias = true);
  Tensor forward(Tape* t, const Tensor& X) const;
  // Same layer with a substituted kernel (e.g. a spectrally normalized one).
  Tensor forward_with_kernel(Tape* t, const Tensor& X, const Tensor& kernel) const;
  void collect_params(std::vector<Param*>& ps);
  size_t weight_count() const { return size_t(kh) * kw * m * n; }
};

// Kernel-converting pieces, exposed for testing and for the direct path.
// S = sigmoid(concat(x_m, z) * Ws); every entry lies strictly in (0, 1).
Tensor gconv_scaling(const Tensor& x_m, const Tensor& z, const Tensor& Ws);
// Column i of the result is S_row[i] * K[:, i].
Tensor gconv_select(const Tensor& K, const Tensor& S_row);
// Linear recombination of the selected bank.
Tensor gconv_combine(const Tensor& Ktilde, const Tensor& WL);

// Convolution with a latent-selected, per-sample kernel bank. The fused
// forward is the default execution: one shared convolution, a per-sample
// channel scaling, and a 1x1 recombination; identical in exact arithmetic to
// materializing each sample's kernel bank (the direct path, kept for oracle
// testing).
struct GConv2d {
  int kh = 0, kw = 0, m = 0, n = 0, dz = 0;
  bool use_bias = true;
  Param K;   // [kh, kw, m, n]
  Param Ws;  // [m+dz, n]
  Param WL;  // [n, n]
  Param b;   // [n], added once on the shared-conv path

  GConv2d() = default;
  GConv2d(const std::string& name, int kh, int kw, int m, int n, int dz, Rng* rng,
          bool bias = true);
  Tensor scaling(Tape* t, const Tensor& X, const Tensor& z) const;  // [b, n]
  Tensor forward(Tape* t, const Tensor& X, const Tensor& z) const;  // fused
  Tensor forward_direct(Tape* t, const Tensor& X, const Tensor& z) const;
  void collect_params(std::vector<Param*>& ps);
  size_t weight_count() const { return size_t(kh) * kw * m * n + size_t(m + dz) * n + size_t(n) * n; }
  size_t extra_weight_count() const { return size_t(m + dz) * n + size_t(n) * n; }
};

// Dense layer realized as a 1x1 GConv on a 1x1 spatial grid; the channel mean
// seen by the scaling path is then the input vector itself.
struct GDense {
  GConv2d g;
  GDense() = default;
  GDense(const std::string& name, int in, int out, int dz, Rng* rng, bool bias = true);
  Tensor forward(Tape* t, const Tensor& x, const Tensor& z) const;
  void collect_params(std::vector<Param*>& ps);
};

// Divides W by a power-iteration estimate of its largest singular value.
// u and v are the persistent estimate vectors; one iteration per training
// step is the intended use, iters=0 evaluates with the stored state only.
// Throws on an all-zero matrix.
Tensor spectral_normalize(const Tensor& W, std::vector<double>& u, std::vector<double>& v,
                          int iters);

struct SpectralNorm {
  std::vector<double> u, v;
  void init(int rows, int cols, Rng* rng);
  // All-zero weights pass through unchanged (nothing to normalize).
  Tensor normalized(Tape* t, Param& W, int rows, int cols, int iters);
};

struct BatchNorm {
  int m = 0;
  double momentum = 0.9;
  double eps = 1e-8;
  Param gamma;  // [m], starts at 1
  Param beta;   // [m], starts at 0
  std::vector<double> run_mean, run_var;

  BatchNorm() = default;
  explicit BatchNorm(const std::string& name, int m);
  Tensor forward(Tape* t, const Tensor& X, bool train);
  void collect_params(std::vector<Param*>& ps);
};

// Batch normalization whose per-sample affine is inferred from the latent:
// gamma = 1 + z*Wg, beta = z*Wb. Reduces to plain BN with unit gain when both
// weight matrices are zero.
struct LatentBatchNorm {
  int m = 0, dz = 0;
  double momentum = 0.9;
  double eps = 1e-8;
  Param Wg;  // [dz, m]
  Param Wb;  // [dz, m]
  std::vector<double> run_mean, run_var;

  LatentBatchNorm() = default;
  LatentBatchNorm(const std::string& name, int m, int dz, Rng* rng);
  Tensor forward(Tape* t, const Tensor& X, const Tensor& z, bool train);
  void collect_params(std::vector<Param*>& ps);
};

// Squeeze-style channel gate: Y = X * sigmoid(relu(gap(X) W1) W2) per channel.
struct ChannelGate {
  int m = 0, reduction = 8;
  Param W1;  // [m, m/r]
  Param W2;  // [m/r, m]

  ChannelGate() = default;
  ChannelGate(const std::string& name, int m, Rng* rng, int reduction = 8);
  Tensor forward(Tape* t, const Tensor& X) const;
  void collect_params(std::vector<Param*>& ps);
};

enum class ConvKind { conv, gconv };

const char* to_string(ConvKind k);
ConvKind conv_kind_from(const std::string& s);  // "conv" | "gconv"

// Generator residual block: BN -> ReLU -> (up) -> conv -> BN -> ReLU -> conv,
// plus an (up then 1x1 conv) skip when channels or resolution change.
struct GenResBlock {
  int m_in = 0, n_out = 0, dz = 0;
  bool up = false;
  ConvKind kind = ConvKind::conv;
  LatentBatchNorm bn1, bn2;
  std::optional<Conv2dLayer> c1_conv, c2_conv;
  std::optional<GConv2d> c1_g, c2_g;
  bool has_skip_conv = false;
  std::optional<Conv2dLayer> skip;

  GenResBlock() = default;
  GenResBlock(const std::string& name, int m_in, int n_out, int dz, ConvKind kind, bool up,
              Rng* rng);
  Tensor forward(Tape* t, const Tensor& X, const Tensor& z, bool train);
  void collect_params(std::vector<Param*>& ps);
};

// Discriminator residual block with spectrally normalized convolutions:
// ReLU -> conv -> ReLU -> conv -> (pool); skip = 1x1 conv -> (pool).
// The leading block uses the standard optimized layout conv -> ReLU -> conv ->
// pool with a pooled 1x1 skip.
struct DiscResBlock {
  int m_in = 0, n_out = 0;
  bool down = false, first = false;
  Conv2dLayer c1, c2;
  SpectralNorm sn1, sn2;
  bool has_skip_conv = false;
  std::optional<Conv2dLayer> skip;
  SpectralNorm sn_skip;

  DiscResBlock() = default;
  DiscResBlock(const std::string& name, int m_in, int n_out, bool down, bool first, Rng* rng);
  // update_estimate: run one power iteration on each weight before use.
  Tensor forward(Tape* t, const Tensor& X, bool update_estimate);
  void collect_params(std::vector<Param*>& ps);
};

}  // namespace gconv
