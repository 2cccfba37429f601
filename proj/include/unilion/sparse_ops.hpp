#pragma once

// Pattern-preserving operators on sparse voxel sets: submanifold 3x3x3
// convolution, per-row LayerNorm, GELU, and voxel merging/expanding with
// explicit parent index maps.

#include "unilion/voxel.hpp"

#include <array>
#include <cmath>
#include <span>
#include <type_traits>
#include <unordered_map>
#include <vector>

namespace unilion {

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr int kKernelVolume = 27;

// Offset slot of (dx, dy, dz) in {-1,0,1}^3.
constexpr int kernel_offset_index(int dx, int dy, int dz) {
  return (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1);
}
inline constexpr int kKernelCenter = kernel_offset_index(0, 0, 0);

// 3x3x3 kernel stored as 27 stacked Cin x Cout blocks; block k holds the
// weights applied to the neighbor at kernel_offset_index(dx, dy, dz).
template <typename Scalar>
struct ConvKernel3 {
  MatrixX<Scalar> weights;  // (27 * Cin) x Cout
  VectorX<Scalar> bias;     // Cout

  Index in_channels() const { return weights.rows() / kKernelVolume; }
  Index out_channels() const { return weights.cols(); }

  auto block(int k) const { return weights.middleRows(k * in_channels(), in_channels()); }
  auto block(int k) { return weights.middleRows(k * in_channels(), in_channels()); }

  static ConvKernel3 zeros(Index cin, Index cout) {
    return {MatrixX<Scalar>::Zero(kKernelVolume * cin, cout), VectorX<Scalar>::Zero(cout)};
  }

  static ConvKernel3 identity(Index c) {
    ConvKernel3 k = zeros(c, c);
    k.block(kKernelCenter).setIdentity();
    return k;
  }
};

// Row i lists, for each of the 27 offsets, the row of the neighbor voxel in
// the same batch, or -1 when that cell is empty.
struct NeighborTable {
  std::vector<std::array<Index, kKernelVolume>> rows;
};

NeighborTable build_neighbor_table(std::span<const VoxelCoord> coords);

// Many-to-one map from fine rows to coarse rows. Children of each parent are
// listed in ascending fine-row order (CSR layout).
struct IndexMap {
  std::vector<Index> parent_of;
  std::vector<Index> child_offsets;  // size coarse_count + 1
  std::vector<Index> child_rows;
  std::vector<VoxelCoord> fine_coords;
  std::vector<VoxelCoord> coarse_coords;
  VoxelGrid fine_grid;
  VoxelGrid coarse_grid;

  Index fine_count() const { return static_cast<Index>(parent_of.size()); }
  Index coarse_count() const { return static_cast<Index>(coarse_coords.size()); }

  std::span<const Index> children(Index parent) const {
    const Index b = child_offsets[static_cast<std::size_t>(parent)];
    const Index e = child_offsets[static_cast<std::size_t>(parent) + 1];
    return {child_rows.data() + b, static_cast<std::size_t>(e - b)};
  }
  Index child_count(Index parent) const {
    return child_offsets[static_cast<std::size_t>(parent) + 1] -
           child_offsets[static_cast<std::size_t>(parent)];
  }
};

// Coarse coordinate floor(c / stride) per row; duplicates in `coords` are
// allowed and simply share a parent. Coarse coordinates come out canonical.
IndexMap build_index_map(std::span<const VoxelCoord> coords, const Eigen::Vector3i& stride,
                         const VoxelGrid& fine_grid);

// --- dense-matrix kernels ---------------------------------------------------

template <typename Scalar>
MatrixX<Scalar> submanifold_conv3(const MatrixX<Scalar>& features, const NeighborTable& table,
                                  const ConvKernel3<Scalar>& kernel) {
  const Index cin = kernel.in_channels();
  require_dims(features.cols() == cin, "submanifold_conv3: input channels do not match kernel");
  require_dims(static_cast<Index>(table.rows.size()) == features.rows(),
               "submanifold_conv3: neighbor table does not match set");
  require_dims(kernel.bias.size() == kernel.out_channels(), "submanifold_conv3: bias size");
  const Index L = features.rows();
  MatrixX<Scalar> out = kernel.bias.transpose().replicate(L, 1);
  MatrixX<Scalar> gathered(L, cin);
  for (int k = 0; k < kKernelVolume; ++k) {
    bool any = false;
    for (Index i = 0; i < L; ++i) {
      const Index n = table.rows[static_cast<std::size_t>(i)][k];
      if (n < 0) {
        gathered.row(i).setZero();
      } else {
        gathered.row(i) = features.row(n);
        any = true;
      }
    }
    if (any) out.noalias() += gathered * kernel.block(k);
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> layer_norm(const MatrixX<Scalar>& x, const VectorX<Scalar>& gamma,
                           const VectorX<Scalar>& beta, Scalar eps = Scalar(kLayerNormEpsilon)) {
  const Index C = x.cols();
  require_dims(gamma.size() == C && beta.size() == C, "layer_norm: affine size != channels");
  MatrixX<Scalar> out(x.rows(), C);
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mean = x.row(i).mean();
    const Scalar var = (x.row(i).array() - mean).square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    out.row(i) = ((x.row(i).array() - mean) * inv * gamma.transpose().array() +
                  beta.transpose().array())
                     .matrix();
  }
  return out;
}

template <typename Scalar>
  requires std::is_floating_point_v<Scalar>
Scalar gelu(Scalar v) {
  return Scalar(0.5) * v * (Scalar(1) + std::erf(v / std::sqrt(Scalar(2))));
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu(v); });
}

// Per-parent sum / mean of child rows in ascending child order.
template <typename Scalar>
MatrixX<Scalar> segment_sum(const MatrixX<Scalar>& fine, const IndexMap& map) {
  require_dims(fine.rows() == map.fine_count(), "segment_sum: row count != map fine count");
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(map.coarse_count(), fine.cols());
  for (Index p = 0; p < map.coarse_count(); ++p)
    for (Index c : map.children(p)) out.row(p) += fine.row(c);
  return out;
}

template <typename Scalar>
MatrixX<Scalar> segment_mean(const MatrixX<Scalar>& fine, const IndexMap& map) {
  MatrixX<Scalar> out = segment_sum(fine, map);
  for (Index p = 0; p < map.coarse_count(); ++p)
    out.row(p) /= static_cast<Scalar>(map.child_count(p));
  return out;
}

// --- set-level wrappers -----------------------------------------------------

template <typename Scalar>
SparseFeatureSet<Scalar> submanifold_conv3(const SparseFeatureSet<Scalar>& set,
                                           const ConvKernel3<Scalar>& kernel) {
  const NeighborTable table = build_neighbor_table(set.coords);
  return {set.coords, submanifold_conv3(set.features, table, kernel), set.grid};
}

template <typename Scalar>
SparseFeatureSet<Scalar> layer_norm(const SparseFeatureSet<Scalar>& set,
                                    const VectorX<Scalar>& gamma, const VectorX<Scalar>& beta,
                                    Scalar eps = Scalar(kLayerNormEpsilon)) {
  return {set.coords, layer_norm(set.features, gamma, beta, eps), set.grid};
}

template <typename Scalar>
SparseFeatureSet<Scalar> gelu(const SparseFeatureSet<Scalar>& set) {
  return {set.coords, gelu(set.features).eval(), set.grid};
}

// Coarse voxel = floor(fine / stride), feature = mean of its children.
template <typename Scalar>
std::pair<SparseFeatureSet<Scalar>, IndexMap> voxel_merge(const SparseFeatureSet<Scalar>& set,
                                                          const Eigen::Vector3i& stride) {
  require_dims((stride.array() >= 1).all(), "voxel_merge: stride components must be >= 1");
  IndexMap map = build_index_map(set.coords, stride, set.grid);
  SparseFeatureSet<Scalar> coarse{map.coarse_coords, segment_mean(set.features, map),
                                  map.coarse_grid};
  return {std::move(coarse), std::move(map)};
}

// Each fine voxel receives a copy of its parent's feature row.
template <typename Scalar>
SparseFeatureSet<Scalar> voxel_expand(const SparseFeatureSet<Scalar>& coarse, const IndexMap& map) {
  require_dims(coarse.size() == map.coarse_count() && coarse.coords == map.coarse_coords,
               "voxel_expand: coarse set does not match index map");
  return {map.fine_coords, gather_rows<Scalar>(coarse.features, map.parent_of), map.fine_grid};
}

}  // namespace unilion
