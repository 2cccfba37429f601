#pragma once

#include "unilion/types.hpp"

#include <algorithm>
#include <compare>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace unilion {

struct VoxelCoord {
  int batch = 0;
  int x = 0;
  int y = 0;
  int z = 0;

  friend bool operator==(const VoxelCoord&, const VoxelCoord&) = default;
};

// Canonical order: batch, then z, then y, then x.
inline bool canonical_less(const VoxelCoord& a, const VoxelCoord& b) {
  return std::tie(a.batch, a.z, a.y, a.x) < std::tie(b.batch, b.z, b.y, b.x);
}

struct VoxelCoordHash {
  std::size_t operator()(const VoxelCoord& c) const noexcept {
    std::uint64_t h = static_cast<std::uint32_t>(c.batch);
    h = h * 0x9E3779B97F4A7C15ULL + static_cast<std::uint32_t>(c.x);
    h = h * 0x9E3779B97F4A7C15ULL + static_cast<std::uint32_t>(c.y);
    h = h * 0x9E3779B97F4A7C15ULL + static_cast<std::uint32_t>(c.z);
    h ^= h >> 31;
    return static_cast<std::size_t>(h);
  }
};

struct VoxelGrid {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d voxel_size{0.3, 0.3, 0.25};
  Eigen::Vector3i extent{1, 1, 1};  // (H, W, D) along x, y, z

  bool valid() const {
    return (voxel_size.array() > 0.0).all() && (extent.array() >= 1).all() &&
           origin.allFinite() && voxel_size.allFinite();
  }

  bool contains(const VoxelCoord& c) const {
    return c.batch >= 0 && c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < extent.x() &&
           c.y < extent.y() && c.z < extent.z();
  }

  // Floor-division lookup; nullopt when the point falls outside the extent.
  std::optional<VoxelCoord> locate(const Eigen::Vector3d& p, int batch = 0) const {
    if (!p.allFinite()) return std::nullopt;
    int idx[3];
    for (int a = 0; a < 3; ++a) {
      const double q = std::floor((p[a] - origin[a]) / voxel_size[a]);
      if (!(q >= 0.0) || q >= static_cast<double>(extent[a])) return std::nullopt;
      idx[a] = static_cast<int>(q);
    }
    return VoxelCoord{batch, idx[0], idx[1], idx[2]};
  }

  Eigen::Vector3d center(const VoxelCoord& c) const {
    return origin + voxel_size.cwiseProduct(
                        Eigen::Vector3d(c.x + 0.5, c.y + 0.5, c.z + 0.5));
  }

  VoxelGrid coarsened(const Eigen::Vector3i& stride) const {
    VoxelGrid g = *this;
    for (int a = 0; a < 3; ++a) {
      g.extent[a] = (extent[a] + stride[a] - 1) / stride[a];
      g.voxel_size[a] = voxel_size[a] * stride[a];
    }
    return g;
  }

  Index cell_count() const {
    return static_cast<Index>(extent.x()) * extent.y() * extent.z();
  }

  friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
    return a.origin == b.origin && a.voxel_size == b.voxel_size && a.extent == b.extent;
  }
};

// Integer voxel coordinates plus one dense feature row per coordinate.
template <typename Scalar>
struct SparseFeatureSet {
  using scalar_type = Scalar;

  std::vector<VoxelCoord> coords;
  MatrixX<Scalar> features;
  VoxelGrid grid;

  Index size() const { return static_cast<Index>(coords.size()); }
  Index channels() const { return features.cols(); }
  bool empty() const { return coords.empty(); }

  static SparseFeatureSet make_empty(const VoxelGrid& grid, Index channels) {
    SparseFeatureSet s;
    s.grid = grid;
    s.features = MatrixX<Scalar>::Zero(0, channels);
    return s;
  }

  template <typename Other>
  SparseFeatureSet<Other> cast() const {
    return SparseFeatureSet<Other>{coords, features.template cast<Other>(), grid};
  }
};

using SparseFeatureSetd = SparseFeatureSet<double>;
using SparseFeatureSetf = SparseFeatureSet<float>;

// Raw points: P x (3 + F), xyz in meters followed by F attributes.
struct PointCloud {
  Eigen::MatrixXd points = Eigen::MatrixXd::Zero(0, 4);

  Index size() const { return points.rows(); }
  Index attribute_count() const { return points.cols() - 3; }
};

inline bool is_canonical(std::span<const VoxelCoord> coords) {
  for (std::size_t i = 1; i < coords.size(); ++i)
    if (!canonical_less(coords[i - 1], coords[i])) return false;
  return true;
}

inline std::vector<Index> canonical_order(std::span<const VoxelCoord> coords) {
  std::vector<Index> order(coords.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return canonical_less(coords[a], coords[b]);
  });
  return order;
}

// Rows of `m` picked by `index`; an index of -1 produces a zero row.
template <typename Scalar>
MatrixX<Scalar> gather_rows(const MatrixX<Scalar>& m, std::span<const Index> index) {
  MatrixX<Scalar> out(static_cast<Index>(index.size()), m.cols());
  for (Index i = 0; i < out.rows(); ++i) {
    const Index src = index[i];
    if (src < 0)
      out.row(i).setZero();
    else
      out.row(i) = m.row(src);
  }
  return out;
}

template <typename Scalar>
SparseFeatureSet<Scalar> canonicalize(const SparseFeatureSet<Scalar>& set) {
  require_dims(set.features.rows() == set.size(), "canonicalize: feature rows != coords");
  const auto order = canonical_order(set.coords);
  SparseFeatureSet<Scalar> out;
  out.grid = set.grid;
  out.coords.reserve(order.size());
  for (Index i : order) out.coords.push_back(set.coords[i]);
  for (std::size_t i = 1; i < out.coords.size(); ++i) {
    if (out.coords[i - 1] == out.coords[i]) {
      const auto& c = out.coords[i];
      throw DuplicateCoordinate("canonicalize: duplicate coordinate (" +
                                std::to_string(c.batch) + "," + std::to_string(c.x) + "," +
                                std::to_string(c.y) + "," + std::to_string(c.z) +
                                "); merge duplicates first");
    }
  }
  out.features = gather_rows<Scalar>(set.features, order);
  return out;
}

// Dynamic voxelization with mean pooling. Each point contributes the row
// [x, y, z, attributes..., dx, dy, dz] where d is the offset from the voxel
// center; the output has 6 + F channels and is canonical-ordered.
SparseFeatureSetd voxelize(const PointCloud& points, const VoxelGrid& grid, int batch = 0);

inline Index voxel_feature_channels(Index attribute_count) { return attribute_count + 6; }

}  // namespace unilion
