#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gconv {

struct CheckCase {
  std::string name;
  double value = 0.0;  // max relative gradient error, or fused/direct deviation
  bool exact = false;  // the value must be exactly zero, not just under threshold
};

// Finite-difference gradient checks: cases_per_layer randomized small-shape
// cases for every layer kind, including both gated-convolution execution
// paths, in a fixed order derived from the seed. inject_fault appends one
// case whose recorded gradient is deliberately corrupted; a harness that
// doesn't flag it is broken.
std::vector<CheckCase> gradcheck_suite(uint64_t seed, int cases_per_layer,
                                       bool inject_fault = false);
constexpr double kGradTolerance = 1e-5;

// Random (input, latent, weights) configurations comparing the per-sample
// direct path against the fused path. Batches cycle through {1, 2, 4},
// channel counts span 2..16, spatial extents 3..8; every tenth case zeroes
// the recombination matrix, which must make the two paths agree bitwise.
std::vector<CheckCase> equivalence_suite(uint64_t seed, int cases);
constexpr double kEquivTolerance = 1e-9;

}  // namespace gconv
