#include "unilion/sparse_ops.hpp"

namespace unilion {

NeighborTable build_neighbor_table(std::span<const VoxelCoord> coords) {
  std::unordered_map<VoxelCoord, Index, VoxelCoordHash> lookup;
  lookup.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) lookup.emplace(coords[i], static_cast<Index>(i));

  NeighborTable table;
  table.rows.resize(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const VoxelCoord& c = coords[i];
    auto& row = table.rows[i];
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          const auto it = lookup.find({c.batch, c.x + dx, c.y + dy, c.z + dz});
          row[kernel_offset_index(dx, dy, dz)] = it == lookup.end() ? -1 : it->second;
        }
  }
  return table;
}

IndexMap build_index_map(std::span<const VoxelCoord> coords, const Eigen::Vector3i& stride,
                         const VoxelGrid& fine_grid) {
  IndexMap map;
  map.fine_coords.assign(coords.begin(), coords.end());
  map.fine_grid = fine_grid;
  map.coarse_grid = fine_grid.coarsened(stride);

  // First-seen labels, then relabel into canonical order.
  std::unordered_map<VoxelCoord, Index, VoxelCoordHash> label;
  label.reserve(coords.size() * 2);
  std::vector<VoxelCoord> seen;
  std::vector<Index> provisional(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const VoxelCoord& c = coords[i];
    const VoxelCoord q{c.batch, c.x / stride.x(), c.y / stride.y(), c.z / stride.z()};
    auto [it, inserted] = label.emplace(q, static_cast<Index>(seen.size()));
    if (inserted) seen.push_back(q);
    provisional[i] = it->second;
  }
  const auto order = canonical_order(seen);
  std::vector<Index> rank(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[static_cast<std::size_t>(order[r])] = static_cast<Index>(r);

  map.coarse_coords.resize(seen.size());
  for (std::size_t r = 0; r < order.size(); ++r) map.coarse_coords[r] = seen[static_cast<std::size_t>(order[r])];

  map.parent_of.resize(coords.size());
  map.child_offsets.assign(seen.size() + 1, 0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const Index p = rank[static_cast<std::size_t>(provisional[i])];
    map.parent_of[i] = p;
    ++map.child_offsets[static_cast<std::size_t>(p) + 1];
  }
  for (std::size_t p = 0; p < seen.size(); ++p) map.child_offsets[p + 1] += map.child_offsets[p];
  map.child_rows.resize(coords.size());
  std::vector<Index> cursor(map.child_offsets.begin(), map.child_offsets.end() - 1);
  for (std::size_t i = 0; i < coords.size(); ++i)
    map.child_rows[static_cast<std::size_t>(cursor[static_cast<std::size_t>(map.parent_of[i])]++)] =
        static_cast<Index>(i);
  return map;
}

}  // namespace unilion
