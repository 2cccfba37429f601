#include "unilion/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace unilion {

void CameraModel::validate() const {
  if (height < 1 || width < 1) throw GeometryError("camera: image size must be positive");
  if (!intrinsics.allFinite() || std::abs(intrinsics.determinant()) < 1e-12)
    throw GeometryError("camera: intrinsics are singular");
  if (!is_rigid(extrinsics)) throw GeometryError("camera: extrinsics are not a rigid transform");
}

DepthBins DepthBins::uniform(double near, double far, Index bins) {
  if (!(far > near) || bins < 1) throw GeometryError("depth bins: need far > near and bins >= 1");
  DepthBins d;
  for (Index b = 0; b <= bins; ++b)
    d.edges.push_back(near + (far - near) * static_cast<double>(b) / static_cast<double>(bins));
  return d;
}

void DepthCandidateRaster::validate(Index K) const {
  require_dims(features.rows() == pixels() && scores.rows() == pixels(),
               "raster: feature/score rows must equal height * width");
  require_dims(scores.cols() == bins.count(), "raster: score columns must equal bin count");
  if (K < 1 || K > bins.count()) throw std::invalid_argument("raster: K must lie in [1, B]");
  if (!scores.allFinite()) throw std::invalid_argument("raster: scores must be finite");
}

bool is_rigid(const Eigen::Matrix4d& T) {
  if (!T.allFinite()) return false;
  const Eigen::Matrix3d R = T.topLeftCorner<3, 3>();
  if ((R.transpose() * R - Eigen::Matrix3d::Identity()).norm() > kRigidTolerance) return false;
  if (R.determinant() < 0.0) return false;
  return T.row(3) == Eigen::RowVector4d(0, 0, 0, 1);
}

void EgoPose::validate() const {
  if (!is_rigid(T)) throw GeometryError("pose: not a rigid transform");
}

Eigen::Matrix4d EgoPose::inverse() const {
  Eigen::Matrix4d inv = Eigen::Matrix4d::Identity();
  const Eigen::Matrix3d Rt = T.topLeftCorner<3, 3>().transpose();
  inv.topLeftCorner<3, 3>() = Rt;
  inv.topRightCorner<3, 1>() = -Rt * T.topRightCorner<3, 1>();
  return inv;
}

EgoPose EgoPose::from_xyz_yaw(double x, double y, double z, double yaw) {
  EgoPose p;
  p.T.topLeftCorner<3, 3>() = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  p.T.topRightCorner<3, 1>() = Eigen::Vector3d(x, y, z);
  return p;
}

void MemoryBank::push(SparseFeatureSetd set, const EgoPose& pose) {
  if (capacity_ == 0) return;
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back({std::move(set), pose});
}

namespace {

void lift_into(const DepthCandidateRaster& raster, const CameraModel& cam, const VoxelGrid& grid,
               Index K, int batch, std::vector<VoxelCoord>& coords,
               std::vector<Eigen::RowVectorXd>& rows) {
  cam.validate();
  raster.validate(K);
  const Eigen::Matrix3d Kinv = cam.intrinsics.inverse();
  const Index B = raster.bins.count();
  std::vector<Index> bins(static_cast<std::size_t>(B));
  std::vector<double> weight(static_cast<std::size_t>(K));
  for (int v = 0; v < raster.height; ++v) {
    for (int u = 0; u < raster.width; ++u) {
      const Index px = static_cast<Index>(v) * raster.width + u;
      const auto score = raster.scores.row(px);
      std::iota(bins.begin(), bins.end(), Index{0});
      std::partial_sort(bins.begin(), bins.begin() + K, bins.end(), [&](Index a, Index b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return a < b;
      });
      // softmax over the selected scores
      const double top = score[bins[0]];
      double total = 0.0;
      for (std::size_t j = 0; j < weight.size(); ++j) {
        weight[j] = std::exp(score[bins[j]] - top);
        total += weight[j];
      }
      const Eigen::Vector3d ray = Kinv * Eigen::Vector3d(u + 0.5, v + 0.5, 1.0);
      for (std::size_t j = 0; j < weight.size(); ++j) {
        const double depth = raster.bins.center(bins[j]);
        const Eigen::Vector4d pc(ray.x() * depth, ray.y() * depth, ray.z() * depth, 1.0);
        const Eigen::Vector3d pe = (cam.extrinsics * pc).head<3>();
        const auto cell = grid.locate(pe, batch);
        if (!cell) continue;
        coords.push_back(*cell);
        rows.push_back(raster.features.row(px) * (weight[j] / total));
      }
    }
  }
}

SparseFeatureSetd sum_duplicates(const std::vector<VoxelCoord>& coords,
                                 const std::vector<Eigen::RowVectorXd>& rows,
                                 const VoxelGrid& grid, Index channels) {
  Eigen::MatrixXd feats(static_cast<Index>(rows.size()), channels);
  for (std::size_t i = 0; i < rows.size(); ++i) feats.row(static_cast<Index>(i)) = rows[i];
  const IndexMap map = build_index_map(coords, Eigen::Vector3i::Ones(), grid);
  return {map.coarse_coords, segment_sum(feats, map), grid};
}

}  // namespace

SparseFeatureSetd lift_camera(const DepthCandidateRaster& raster, const CameraModel& cam,
                              const VoxelGrid& grid, Index K, int batch) {
  std::vector<VoxelCoord> coords;
  std::vector<Eigen::RowVectorXd> rows;
  lift_into(raster, cam, grid, K, batch, coords, rows);
  return sum_duplicates(coords, rows, grid, raster.features.cols());
}

SparseFeatureSetd lift_cameras(std::span<const CameraView> views, const VoxelGrid& grid,
                               Index channels, Index K, int batch) {
  std::vector<VoxelCoord> coords;
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& v : views) {
    require_dims(v.raster.features.cols() == channels, "lift_cameras: raster channel mismatch");
    lift_into(v.raster, v.model, grid, K, batch, coords, rows);
  }
  return sum_duplicates(coords, rows, grid, channels);
}

namespace {

void check_union_inputs(const VoxelGrid& grid, Index channels, const VoxelGrid& other,
                        Index other_channels, Index other_rows) {
  if (!(grid == other)) throw GeometryError("merge_union: sets live on different grids");
  require_dims(other_rows == 0 || channels == other_channels, "merge_union: channel mismatch");
}

// Channel count of the first non-empty input.
template <typename Fn>
Index union_channels(std::size_t n, Fn channels_rows) {
  for (std::size_t i = 0; i < n; ++i) {
    const auto [c, r] = channels_rows(i);
    if (r > 0) return c;
  }
  return channels_rows(0).first;
}

}  // namespace

SparseFeatureSetd merge_union(std::span<const SparseFeatureSetd> sets) {
  require_dims(!sets.empty(), "merge_union: no inputs");
  std::vector<VoxelCoord> coords;
  const Index C = union_channels(sets.size(), [&](std::size_t i) {
    return std::pair<Index, Index>{sets[i].channels(), sets[i].size()};
  });
  Index rows = 0;
  for (const auto& s : sets) {
    check_union_inputs(sets[0].grid, C, s.grid, s.channels(), s.size());
    rows += s.size();
  }
  Eigen::MatrixXd feats(rows, C);
  Index r = 0;
  for (const auto& s : sets) {
    coords.insert(coords.end(), s.coords.begin(), s.coords.end());
    if (s.size() > 0) feats.middleRows(r, s.size()) = s.features;
    r += s.size();
  }
  const IndexMap map = build_index_map(coords, Eigen::Vector3i::Ones(), sets[0].grid);
  return {map.coarse_coords, segment_mean(feats, map), sets[0].grid};
}

SparseFeatureSetd concat_modalities(const SparseFeatureSetd& vl, const SparseFeatureSetd& vc) {
  const SparseFeatureSetd parts[] = {vl, vc};
  return merge_union(parts);
}

SparseVar merge_union(ad::Tape& t, std::span<const SparseVar> sets) {
  require_dims(!sets.empty(), "merge_union: no inputs");
  std::vector<VoxelCoord> coords;
  std::vector<ad::Var> parts;
  const Index C = union_channels(sets.size(), [&](std::size_t i) {
    const auto& v = t.value(sets[i].features);
    return std::pair<Index, Index>{v.cols(), v.rows()};
  });
  for (const auto& s : sets) {
    const auto& v = t.value(s.features);
    check_union_inputs(sets[0].grid, C, s.grid, v.cols(), v.rows());
    if (v.rows() == 0) continue;
    coords.insert(coords.end(), s.coords.begin(), s.coords.end());
    parts.push_back(s.features);
  }
  if (parts.empty()) return {{}, t.constant(Eigen::MatrixXd::Zero(0, C)), sets[0].grid};
  const IndexMap map = build_index_map(coords, Eigen::Vector3i::Ones(), sets[0].grid);
  const ad::Var stacked = ad::concat_rows(t, parts);
  return {map.coarse_coords, ad::segment_mean(t, stacked, map), sets[0].grid};
}

SparseFeatureSetd align_temporal(const SparseFeatureSetd& prev, const EgoPose& pose_prev,
                                 const EgoPose& pose_cur, const VoxelGrid& grid) {
  pose_prev.validate();
  pose_cur.validate();
  const Eigen::Matrix4d rel = pose_cur.inverse() * pose_prev.T;
  std::vector<VoxelCoord> coords;
  std::vector<Index> kept;
  for (Index i = 0; i < prev.size(); ++i) {
    const VoxelCoord& c = prev.coords[static_cast<std::size_t>(i)];
    const Eigen::Vector3d p = prev.grid.center(c);
    const Eigen::Vector3d q = rel.topLeftCorner<3, 3>() * p + rel.topRightCorner<3, 1>();
    if (const auto cell = grid.locate(q, c.batch)) {
      coords.push_back(*cell);
      kept.push_back(i);
    }
  }
  const Eigen::MatrixXd feats = gather_rows<double>(prev.features, kept);
  const IndexMap map = build_index_map(coords, Eigen::Vector3i::Ones(), grid);
  return {map.coarse_coords, segment_mean(feats, map), grid};
}

SparseFeatureSetd fuse_frame(const SparseFeatureSetd& cur, MemoryBank& bank,
                             const EgoPose& pose_cur) {
  std::vector<SparseFeatureSetd> parts{cur};
  for (const auto& e : bank.entries()) parts.push_back(align_temporal(e.set, e.pose, pose_cur, cur.grid));
  SparseFeatureSetd out = merge_union(parts);
  bank.push(cur, pose_cur);
  return out;
}

}  // namespace unilion
