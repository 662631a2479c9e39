#pragma once
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>

namespace gconv {

// Seeded RNG with a fixed normal transform (Box-Muller) so that a seed pins
// the exact draw sequence independently of the standard library in use.
class Rng {
public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform in [0, n); bias from the modulo is < n/2^64 and vanishes when n divides 2^64
  uint64_t integer(uint64_t n) { return engine_() % n; }

  int integer_in(int lo, int hi) {  // inclusive range
    return lo + int(integer(uint64_t(hi - lo + 1)));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.28318530717958647692 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  void fill_normal(double* p, size_t n, double stddev = 1.0) {
    for (size_t i = 0; i < n; ++i) p[i] = stddev * normal();
  }

  uint64_t raw() { return engine_(); }

private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gconv
