#include "unilion/partition.hpp"

#include <numeric>

namespace unilion {

std::uint64_t sort_key(const VoxelCoord& c, const WindowShape& ws, AxisOrder order,
                       const Eigen::Vector3i& extent) {
  const std::uint64_t nwx = static_cast<std::uint64_t>((extent.x() + ws.sx - 1) / ws.sx);
  const std::uint64_t nwy = static_cast<std::uint64_t>((extent.y() + ws.sy - 1) / ws.sy);
  const std::uint64_t nwz = static_cast<std::uint64_t>((extent.z() + ws.sz - 1) / ws.sz);
  const std::uint64_t wx = static_cast<std::uint64_t>(c.x / ws.sx);
  const std::uint64_t wy = static_cast<std::uint64_t>(c.y / ws.sy);
  const std::uint64_t wz = static_cast<std::uint64_t>(c.z / ws.sz);
  const std::uint64_t ox = static_cast<std::uint64_t>(c.x % ws.sx);
  const std::uint64_t oy = static_cast<std::uint64_t>(c.y % ws.sy);
  const std::uint64_t oz = static_cast<std::uint64_t>(c.z % ws.sz);
  const std::uint64_t sx = static_cast<std::uint64_t>(ws.sx);
  const std::uint64_t sy = static_cast<std::uint64_t>(ws.sy);
  const std::uint64_t sz = static_cast<std::uint64_t>(ws.sz);

  std::uint64_t window = 0;
  std::uint64_t local = 0;
  if (order == AxisOrder::XMajor) {
    window = wx + nwx * (wy + nwy * wz);
    local = (ox * sy + oy) * sz + oz;
  } else {
    window = wy + nwy * (wx + nwx * wz);
    local = (oy * sx + ox) * sz + oz;
  }
  const std::uint64_t window_volume = sx * sy * sz;
  const std::uint64_t windows = nwx * nwy * nwz;
  return (static_cast<std::uint64_t>(c.batch) * windows + window) * window_volume + local;
}

GroupLayout partition(std::span<const VoxelCoord> coords, const Eigen::Vector3i& extent,
                      const WindowShape& ws, AxisOrder order, Index group_size) {
  require_dims(group_size >= 1, "partition: group size must be >= 1");
  require_dims(ws.valid(), "partition: window shape components must be >= 1");

  std::vector<std::uint64_t> keys(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) keys[i] = sort_key(coords[i], ws, order, extent);

  GroupLayout layout;
  layout.group_size = group_size;
  layout.perm.resize(coords.size());
  std::iota(layout.perm.begin(), layout.perm.end(), Index{0});
  std::sort(layout.perm.begin(), layout.perm.end(),
            [&](Index a, Index b) { return keys[a] < keys[b]; });
  const Index L = layout.length();
  layout.group_count = (L + group_size - 1) / group_size;
  layout.pad_len = layout.group_count * group_size - L;
  return layout;
}

}  // namespace unilion
