#pragma once

// Seedable generator used everywhere randomness is needed.
//
// Algorithm (so other implementations can reproduce golden files):
//   engine   : std::mt19937_64 seeded with the 64-bit seed (standard-defined)
//   uniform  : (next() >> 11) * 2^-53, in [0, 1)
//   normal   : Box-Muller, r = sqrt(-2 ln(1 - U1)), value = r * cos(2 pi U2),
//              two engine draws per value, no caching
//   integer  : lo + next() % (hi - lo + 1)
//   fork(k)  : new engine seeded with splitmix64(next() ^ k)
// Matrices are filled in column-major order.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace unilion {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * normal();
    return m;
  }

  Eigen::MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = uniform(lo, hi);
    return m;
  }

  Eigen::VectorXd normal_vector(Eigen::Index n, double scale = 1.0) {
    return normal_matrix(n, 1, scale);
  }

  Rng fork(std::uint64_t stream) { return Rng(splitmix64(engine_() ^ stream)); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace unilion
