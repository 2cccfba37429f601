#include "unilion/voxel.hpp"

#include <cmath>

namespace unilion {

SparseFeatureSetd voxelize(const PointCloud& cloud, const VoxelGrid& grid, int batch) {
  if (!grid.valid()) throw GeometryError("voxelize: invalid grid");
  require_dims(cloud.points.cols() >= 3, "voxelize: points need at least xyz columns");

  const Index channels = voxel_feature_channels(cloud.attribute_count());
  const Index raw = cloud.points.cols();

  struct Entry {
    VoxelCoord coord;
    Index row;
  };
  std::vector<Entry> kept;
  kept.reserve(static_cast<std::size_t>(cloud.size()));
  for (Index i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d p = cloud.points.row(i).head<3>().transpose();
    if (auto c = grid.locate(p, batch)) kept.push_back({*c, i});
  }

  // Fixed accumulation order: voxel key, then the full point row.
  const auto& pts = cloud.points;
  std::sort(kept.begin(), kept.end(), [&](const Entry& a, const Entry& b) {
    if (canonical_less(a.coord, b.coord)) return true;
    if (canonical_less(b.coord, a.coord)) return false;
    for (Index k = 0; k < raw; ++k) {
      const double va = pts(a.row, k);
      const double vb = pts(b.row, k);
      if (va < vb) return true;
      if (vb < va) return false;
    }
    return false;
  });

  SparseFeatureSetd out = SparseFeatureSetd::make_empty(grid, channels);
  std::vector<Eigen::VectorXd> sums;
  std::vector<Index> counts;
  Eigen::VectorXd row(channels);
  for (const Entry& e : kept) {
    if (out.coords.empty() || !(out.coords.back() == e.coord)) {
      out.coords.push_back(e.coord);
      sums.push_back(Eigen::VectorXd::Zero(channels));
      counts.push_back(0);
    }
    const Eigen::Vector3d center = grid.center(e.coord);
    row.head(raw) = pts.row(e.row).transpose();
    for (int a = 0; a < 3; ++a) row[raw + a] = pts(e.row, a) - center[a];
    sums.back() += row;
    ++counts.back();
  }

  out.features.resize(out.size(), channels);
  for (Index i = 0; i < out.size(); ++i)
    out.features.row(i) = (sums[i] / static_cast<double>(counts[i])).transpose();
  return out;
}

}  // namespace unilion
