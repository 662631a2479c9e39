#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gconv/layers.hpp"

namespace gconv {

enum class Role { generator, discriminator };

// One residual stage: output width plus the resampling flag (generators
// upsample, discriminators downsample).
struct Stage {
  int channels = 0;
  bool resample = false;
};

// Declarative network description. resolution 0 denotes the toy
// fully-connected nets; 32/128/256 are the image models. Image generators
// start from an FC stem to a 4x4 grid and end with BN -> ReLU -> 3x3 conv ->
// tanh; image discriminators end with ReLU -> global sum -> dense score.
struct ArchSpec {
  int resolution = 32;
  Role role = Role::generator;
  ConvKind kind = ConvKind::conv;
  int d_z = 32;
  int image_channels = 3;
  int data_dim = 2;             // toy data dimensionality
  int fc_channels = 0;          // generator stem width at 4x4
  std::vector<Stage> stages;
  std::vector<int> toy_widths;  // resolution 0: hidden widths then output width

  void validate() const;
};

// Stage tables for the supported resolutions; throws on anything else.
ArchSpec make_arch(int resolution, Role role, ConvKind kind);

struct ShapeTraceRow {
  std::string name;
  std::vector<int> shape;
};

struct ToyGenerator {
  ConvKind kind = ConvKind::conv;
  int d_z = 32;
  std::vector<Dense> hidden_c;   // plain kind
  std::vector<GDense> hidden_g;  // gconv kind, conditioned on the input latent
  Dense out;

  ToyGenerator() = default;
  ToyGenerator(const ArchSpec& spec, Rng* rng);
  Tensor forward(Tape* t, const Tensor& z, std::vector<ShapeTraceRow>* trace = nullptr) const;
  void collect_params(std::vector<Param*>& ps);
};

struct ToyDiscriminator {
  std::vector<Dense> layers;  // ReLU between, linear score head

  ToyDiscriminator() = default;
  ToyDiscriminator(const ArchSpec& spec, Rng* rng);
  Tensor forward(Tape* t, const Tensor& x, std::vector<ShapeTraceRow>* trace = nullptr) const;
  void collect_params(std::vector<Param*>& ps);
};

struct ImageGenerator {
  ArchSpec spec;
  Dense fc;
  std::vector<GenResBlock> blocks;
  BatchNorm bn_out;
  Conv2dLayer conv_out;

  ImageGenerator() = default;
  ImageGenerator(const ArchSpec& spec, Rng* rng);
  Tensor forward(Tape* t, const Tensor& z, bool train,
                 std::vector<ShapeTraceRow>* trace = nullptr);
  void collect_params(std::vector<Param*>& ps);
};

struct ImageDiscriminator {
  ArchSpec spec;
  std::vector<DiscResBlock> blocks;
  Dense head;
  SpectralNorm sn_head;

  ImageDiscriminator() = default;
  ImageDiscriminator(const ArchSpec& spec, Rng* rng);
  Tensor forward(Tape* t, const Tensor& X, bool update_estimate,
                 std::vector<ShapeTraceRow>* trace = nullptr);
  void collect_params(std::vector<Param*>& ps);
};

// The toy pair trained against each other, built deterministically from one
// seed (generator first, discriminator second, one shared stream).
struct ToyGan {
  ToyGenerator gen;
  ToyDiscriminator dis;

  ToyGan(ConvKind kind, int d_z, uint64_t seed);
  std::vector<Param*> gen_params();
  std::vector<Param*> dis_params();
  std::vector<Param*> all_params();
};

enum class CountPolicy { conv_only, all };

struct LayerCount {
  std::string name;
  std::vector<int> shape;
  size_t count = 0;
};

// conv_only counts the residual blocks' internal 3x3 convolutions plus the
// generator's final output conv: base kernels and, for the gconv kind, the
// selection and recombination matrices. 1x1 shortcut convs, the FC stem,
// normalization affines, and biases are excluded. all counts every trainable
// value.
struct ParamReport {
  int resolution = 0;
  ConvKind kind = ConvKind::conv;
  CountPolicy policy = CountPolicy::conv_only;
  size_t total_weights = 0;
  size_t conv_weights = 0;
  size_t gconv_extra = 0;
  std::vector<LayerCount> layers;
};

// Counts from the plan alone; no weights are materialized.
ParamReport count_weights(const ArchSpec& spec, CountPolicy policy);

// {resolution, conv_kind, conv_weights, gconv_extra, layers:[{name, shape, count}]}
std::string param_report_json(const ParamReport& r);

// Builds the network with zero weights and traces a batch-2 forward,
// recording every stage's output shape. A shape inconsistency surfaces as a
// ShapeError naming the failing stage.
std::vector<ShapeTraceRow> shape_audit(const ArchSpec& spec);

}  // namespace gconv
