#include "gconv/gmm.hpp"

#include <cmath>
#include <numbers>

namespace gconv {

Tensor gmm_centers(const GmmSpec& spec) {
  if (spec.modes < 1) throw ValueError("gmm: modes must be >= 1");
  Tensor c({spec.modes, 2});
  for (int k = 0; k < spec.modes; ++k) {
    const double a = 2.0 * std::numbers::pi * double(k) / double(spec.modes);
    c[size_t(2 * k)] = spec.radius * std::cos(a);
    c[size_t(2 * k + 1)] = spec.radius * std::sin(a);
  }
  return c;
}

Tensor sample_gmm(const GmmSpec& spec, int count, Rng& rng) {
  if (count < 0) throw ValueError("gmm: count must be >= 0");
  if (spec.stddev < 0.0) throw ValueError("gmm: stddev must be >= 0");
  const Tensor centers = gmm_centers(spec);
  Tensor out({count, 2});
  for (int i = 0; i < count; ++i) {
    const size_t k = size_t(rng.integer(uint64_t(spec.modes)));
    out[size_t(2 * i)] = centers[2 * k] + spec.stddev * rng.normal();
    out[size_t(2 * i + 1)] = centers[2 * k + 1] + spec.stddev * rng.normal();
  }
  return out;
}

}  // namespace gconv
