#pragma once

// Token-level fusion: camera voxels from top-K depth candidates, LiDAR/camera
// union with mean merging, rigid temporal alignment and a streaming memory
// bank of past frames.

#include "unilion/backbone.hpp"
#include "unilion/voxel.hpp"

#include <deque>
#include <span>
#include <vector>

namespace unilion {

struct CameraModel {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix4d extrinsics = Eigen::Matrix4d::Identity();  // camera -> ego
  int height = 1;
  int width = 1;

  void validate() const;  // throws GeometryError
};

// Uniform depth bins; bin b covers [edges[b], edges[b+1]).
struct DepthBins {
  std::vector<double> edges;

  static DepthBins uniform(double near, double far, Index bins);
  Index count() const { return static_cast<Index>(edges.size()) - 1; }
  double center(Index b) const {
    return 0.5 * (edges[static_cast<std::size_t>(b)] + edges[static_cast<std::size_t>(b) + 1]);
  }
};

// Row v * width + u holds pixel (u, v).
struct DepthCandidateRaster {
  int height = 0;
  int width = 0;
  Eigen::MatrixXd features;  // pixels x C
  Eigen::MatrixXd scores;    // pixels x B
  DepthBins bins = DepthBins::uniform(1.0, 60.0, 48);

  Index pixels() const { return static_cast<Index>(height) * width; }
  void validate(Index K) const;
};

struct EgoPose {
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();  // frame -> world

  void validate() const;  // throws GeometryError
  // Rigid inverse.
  Eigen::Matrix4d inverse() const;
  static EgoPose from_xyz_yaw(double x, double y, double z, double yaw);
};

inline constexpr double kRigidTolerance = 1e-9;

// Rigid check: orthonormal rotation within kRigidTolerance, det +1, last row
// (0, 0, 0, 1).
bool is_rigid(const Eigen::Matrix4d& T);

class MemoryBank {
 public:
  struct Entry {
    SparseFeatureSetd set;
    EgoPose pose;
  };

  explicit MemoryBank(std::size_t capacity = 3) : capacity_(capacity) {}

  void push(SparseFeatureSetd set, const EgoPose& pose);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  // Oldest first.
  const std::deque<Entry>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

struct CameraView {
  CameraModel model;
  DepthCandidateRaster raster;
};

inline constexpr Index kDefaultTopK = 4;

SparseFeatureSetd lift_camera(const DepthCandidateRaster& raster, const CameraModel& cam,
                              const VoxelGrid& grid, Index K = kDefaultTopK, int batch = 0);
// All cameras of one frame; voxels hit from several cameras are summed too.
// `channels` sizes the result when there are no cameras.
SparseFeatureSetd lift_cameras(std::span<const CameraView> views, const VoxelGrid& grid,
                               Index channels, Index K = kDefaultTopK, int batch = 0);

// Union of several sets on one grid; coordinates present in more than one
// set get the mean of their rows.
SparseFeatureSetd merge_union(std::span<const SparseFeatureSetd> sets);
SparseFeatureSetd concat_modalities(const SparseFeatureSetd& vl, const SparseFeatureSetd& vc);

SparseFeatureSetd align_temporal(const SparseFeatureSetd& prev, const EgoPose& pose_prev,
                                 const EgoPose& pose_cur, const VoxelGrid& grid);

// Aligns every bank entry into the current frame, merges them with `cur`
// and then pushes `cur` into the bank.
SparseFeatureSetd fuse_frame(const SparseFeatureSetd& cur, MemoryBank& bank,
                             const EgoPose& pose_cur);

// Tape form of merge_union.
SparseVar merge_union(ad::Tape& t, std::span<const SparseVar> sets);

}  // namespace unilion
