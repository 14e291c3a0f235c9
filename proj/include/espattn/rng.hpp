#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "espattn/matrix.hpp"

namespace espattn {

// mt19937_64 with explicit uniform/Box-Muller transforms. std::normal_distribution
// is implementation-defined, which would break byte-identical CSV output across
// standard libraries, so the transforms are spelled out here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() {  // [0, 1)
    return (engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t integer(std::uint64_t bound) {  // [0, bound)
    // modulo bias is irrelevant at the bounds used here (tiny vs 2^64)
    return engine_() % bound;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal();
    return m;
  }

  Vector normal_vector(std::size_t n, double stddev = 1.0) {
    Vector v(n);
    for (double& x : v) x = stddev * normal();
    return v;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace espattn
