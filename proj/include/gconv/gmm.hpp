#pragma once

#include <vector>

#include "gconv/rng.hpp"
#include "gconv/tensor.hpp"

namespace gconv {

// Ring of Gaussians in the plane. Modes sit evenly spaced on a circle,
// starting at angle 0, each with isotropic stddev and equal weight.
struct GmmSpec {
  int modes = 8;
  double radius = 2.0;
  double stddev = 0.02;
};

// Mode centers as a [modes, 2] tensor, mode k at angle 2*pi*k/modes.
Tensor gmm_centers(const GmmSpec& spec);

// Draws count points, each from a uniformly chosen mode. Returns [count, 2].
// Consumes exactly one integer and two normals from rng per point.
Tensor sample_gmm(const GmmSpec& spec, int count, Rng& rng);

}  // namespace gconv
