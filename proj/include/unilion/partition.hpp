#pragma once

#include "unilion/voxel.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace unilion {

struct WindowShape {
  int sx = 1;
  int sy = 1;
  int sz = 1;

  bool valid() const { return sx >= 1 && sy >= 1 && sz >= 1; }
  friend bool operator==(const WindowShape&, const WindowShape&) = default;
};

enum class AxisOrder { XMajor, YMajor };

// Serialization of a sparse set into equal-size groups. Group g covers
// perm[g*G, min((g+1)*G, L)); the final group is logically padded with
// pad_len masked slots.
struct GroupLayout {
  std::vector<Index> perm;
  Index group_size = 1;
  Index group_count = 0;
  Index pad_len = 0;

  Index length() const { return static_cast<Index>(perm.size()); }

  std::span<const Index> group(Index g) const {
    const Index begin = g * group_size;
    const Index end = std::min(begin + group_size, length());
    return {perm.data() + begin, static_cast<std::size_t>(end - begin)};
  }
};

// Orders voxels by window index, then by in-window offset. Windows are
// linearized row-major with the major axis fastest; inside a window XMajor
// compares (x, y, z) and YMajor compares (y, x, z). Batch is most significant.
std::uint64_t sort_key(const VoxelCoord& coord, const WindowShape& ws, AxisOrder order,
                       const Eigen::Vector3i& extent);

GroupLayout partition(std::span<const VoxelCoord> coords, const Eigen::Vector3i& extent,
                      const WindowShape& ws, AxisOrder order, Index group_size);

template <typename Scalar>
GroupLayout partition(const SparseFeatureSet<Scalar>& set, const WindowShape& ws,
                      AxisOrder order, Index group_size) {
  return partition(set.coords, set.grid.extent, ws, order, group_size);
}

}  // namespace unilion
