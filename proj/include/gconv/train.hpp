#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gconv/gmm.hpp"
#include "gconv/metrics.hpp"
#include "gconv/models.hpp"

namespace gconv {

enum class LossKind { cross_entropy, hinge, lsgan };

const char* to_string(LossKind k);
LossKind loss_kind_from(const std::string& s);  // "ce" | "hinge" | "lsgan"

// Batch-mean adversarial losses over raw scores. cross_entropy treats the
// scores as logits and evaluates through softplus, so the value stays finite
// for any input. Scores must be non-empty; real and fake batches may differ
// in size (each term is its own mean).
Tensor loss_d(const Tensor& scores_real, const Tensor& scores_fake, LossKind kind);
Tensor loss_g(const Tensor& scores_fake, LossKind kind);

// Adam with beta1 = 0: the bias-corrected first moment equals the raw
// gradient, so only the second moment carries state. Epsilon is added outside
// the square root. The parameter set is fixed at the first step; a NaN
// gradient aborts with the parameter's name.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
  long t = 0;

  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;

  Adam() = default;
  explicit Adam(double lr_) : lr(lr_) {}
  void step(const std::vector<Param*>& params);
};

struct TrainConfig {
  uint64_t seed = 1;
  int d_z = 32;
  int batch_g = 256;
  int batch_d = 256;
  int n_dis = 1;
  double lr_g = 2e-4;
  double lr_d = 2e-4;
  long iterations = 15000;
  LossKind loss = LossKind::hinge;
  ConvKind kind = ConvKind::conv;
  long decay_last = 0;  // linear decay to zero over the final N iterations

  long snapshot_interval = 500;
  int eval_samples = 2000;
  int final_samples = 10000;

  // Strict check for externally supplied configs: n_dis >= 1, positive
  // learning rates, positive batch sizes and sample counts.
  void validate() const;
};

// The desk-scale defaults used for the mode-coverage experiment.
TrainConfig toy_defaults();
// Two-time-scale update rule: lr_D = 4 * lr_G, one D step per G step.
TrainConfig ttur_regime();
// lr 2e-4, five D steps per G step, G batch twice the D batch.
TrainConfig cifar_regime();

struct HistoryRow {
  long iter = 0;
  double loss_d = 0.0;
  double loss_g = 0.0;
  int mode_coverage = 0;
  double high_quality_ratio = 0.0;
};

struct TrainHistory {
  std::vector<HistoryRow> rows;
  std::string to_csv() const;  // header iter,loss_d,loss_g,mode_coverage,high_quality_ratio
};

struct TrainResult {
  TrainHistory history;
  Tensor samples;     // [final_samples, 2] drawn from the trained generator
  ModeReport report;  // coverage of those samples
};

// Alternating loop: n_dis discriminator steps on fresh batches, then one
// generator step. Snapshots are taken every snapshot_interval iterations and
// at the end from an evaluation RNG stream that never touches the training
// stream. Bitwise reproducible for a fixed seed; a non-finite loss raises
// TrainingError carrying the iteration. lr = 0 is allowed here (useful as a
// no-op probe) even though validate() rejects it for external configs.
TrainResult train_gan(ToyGan& gan, const TrainConfig& cfg, const GmmSpec& data);

}  // namespace gconv
