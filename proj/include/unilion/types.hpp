#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace unilion {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

// Shape or channel-count disagreement between operands.
class DimensionMismatch : public std::invalid_argument {
 public:
  explicit DimensionMismatch(const std::string& what) : std::invalid_argument(what) {}
};

// canonicalize() was handed two rows with the same coordinate.
class DuplicateCoordinate : public std::invalid_argument {
 public:
  explicit DuplicateCoordinate(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid geometry: singular intrinsics, non-rigid pose, bad grid.
class GeometryError : public std::invalid_argument {
 public:
  explicit GeometryError(const std::string& what) : std::invalid_argument(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionMismatch(what);
}

}  // namespace unilion
