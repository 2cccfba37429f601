#pragma once

// Deterministic synthetic driving scenes: moving boxes with fixed body-frame
// point samples, a ground patch, an ego trajectory and pinhole cameras whose
// depth-candidate rasters peak at the true ray depth.

#include "unilion/fusion.hpp"
#include "unilion/io.hpp"
#include "unilion/rng.hpp"
#include "unilion/voxel.hpp"

#include <cstdint>
#include <vector>

namespace unilion {

struct SceneSpec {
  VoxelGrid grid;  // ego-frame grid the scene is built for
  int frames = 4;
  int boxes = 4;
  int points_per_box = 120;
  int ground_points = 300;
  double dt = 0.5;             // seconds between frames
  double ego_speed = 0.6;      // m/s along ego x
  double ego_yaw_rate = 0.05;  // rad/s
  double max_box_speed = 0.6;  // m/s
  int cameras = 2;
  int raster_height = 8;
  int raster_width = 8;
  Index channels = 8;  // camera feature channels
  double intensity_noise = 0.05;

  void validate() const;  // throws ConfigError
};

struct SceneBox {
  int id = 0;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();  // world frame at t = 0
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();  // world frame, m/s

  Eigen::Vector3d center_at(double t) const { return center + velocity * t; }
};

struct SceneFrame {
  int index = 0;
  double timestamp = 0.0;
  EgoPose pose;
  PointCloud points;        // ego frame: x, y, z, intensity
  std::vector<int> labels;  // box id per point, -1 for ground
  std::vector<CameraView> cameras;
  std::vector<SceneBox> boxes;

  nlohmann::json to_json() const;
  static SceneFrame from_json(const nlohmann::json& j);
};

// Same (spec, seed) always yields the same frames.
std::vector<SceneFrame> generate_scene(const SceneSpec& spec, std::uint64_t seed);

// Box centers in the ego frame of `frame`.
std::vector<Eigen::Vector3d> box_centers_ego(const SceneFrame& frame);

}  // namespace unilion
