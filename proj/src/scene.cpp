#include "unilion/scene.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace unilion {

namespace {

constexpr double kGroundZ = -0.9;
constexpr double kCameraHeight = 0.5;

// Columns are the camera right / down / forward axes in the ego frame.
Eigen::Matrix3d camera_base() {
  Eigen::Matrix3d R;
  R << 0, 0, 1,  //
      -1, 0, 0,  //
      0, -1, 0;
  return R;
}

std::optional<double> hit_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                              const Eigen::Vector3d& center, const Eigen::Vector3d& size) {
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double mn = center[a] - 0.5 * size[a];
    const double mx = center[a] + 0.5 * size[a];
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < mn || o[a] > mx) return std::nullopt;
      continue;
    }
    double t0 = (mn - o[a]) / d[a];
    double t1 = (mx - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
    if (lo > hi) return std::nullopt;
  }
  return lo > 0.0 ? std::optional<double>(lo) : std::nullopt;
}

Eigen::Vector3d transform(const Eigen::Matrix4d& T, const Eigen::Vector3d& p) {
  return T.topLeftCorner<3, 3>() * p + T.topRightCorner<3, 1>();
}

}  // namespace

void SceneSpec::validate() const {
  if (!grid.valid()) throw ConfigError("scene: invalid grid");
  if (frames < 0 || boxes < 0 || points_per_box < 0 || ground_points < 0 || cameras < 0)
    throw ConfigError("scene: counts must be >= 0");
  if (raster_height < 1 || raster_width < 1) throw ConfigError("scene: raster size must be >= 1");
  if (channels < 1) throw ConfigError("scene: channels must be >= 1");
  if (!(dt > 0.0)) throw ConfigError("scene: dt must be positive");
}

std::vector<SceneFrame> generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Rng layout = rng.fork(1);
  const Eigen::Vector3d lo = spec.grid.origin;
  const Eigen::Vector3d hi =
      spec.grid.origin + spec.grid.voxel_size.cwiseProduct(spec.grid.extent.cast<double>());

  std::vector<SceneBox> boxes;
  std::vector<Eigen::MatrixXd> body;  // per box: points_per_box x 3 offsets
  std::vector<Eigen::VectorXd> box_intensity;
  std::vector<Eigen::VectorXd> signature;
  for (int b = 0; b < spec.boxes; ++b) {
    SceneBox box;
    box.id = b;
    box.size = {layout.uniform(0.6, 1.5), layout.uniform(0.6, 1.5), layout.uniform(0.6, 1.2)};
    box.center = {layout.uniform(lo.x() + 1.0, hi.x() - 1.0), layout.uniform(lo.y() + 1.0, hi.y() - 1.0),
                  kGroundZ + 0.5 * box.size.z()};
    const double heading = layout.uniform(0.0, 2.0 * std::numbers::pi);
    const double speed = layout.uniform(0.0, spec.max_box_speed);
    box.velocity = {speed * std::cos(heading), speed * std::sin(heading), 0.0};
    Eigen::MatrixXd offs(spec.points_per_box, 3);
    for (int i = 0; i < spec.points_per_box; ++i)
      for (int a = 0; a < 3; ++a) offs(i, a) = layout.uniform(-0.5, 0.5) * box.size[a];
    body.push_back(std::move(offs));
    box_intensity.push_back(layout.uniform_matrix(spec.points_per_box, 1, 0.3, 1.0));
    signature.push_back(layout.normal_vector(spec.channels));
    boxes.push_back(box);
  }
  Eigen::MatrixXd ground(spec.ground_points, 3);
  for (int i = 0; i < spec.ground_points; ++i)
    ground.row(i) << layout.uniform(lo.x(), hi.x()), layout.uniform(lo.y(), hi.y()), kGroundZ;
  const Eigen::VectorXd ground_intensity = layout.uniform_matrix(spec.ground_points, 1, 0.0, 0.2);
  const Eigen::VectorXd ground_signature = layout.normal_vector(spec.channels, 0.3);

  const DepthBins bins = DepthBins::uniform(1.0, 60.0, 48);
  const double bin_width = bins.edges[1] - bins.edges[0];

  std::vector<SceneFrame> frames;
  for (int f = 0; f < spec.frames; ++f) {
    Rng noise = rng.fork(100 + static_cast<std::uint64_t>(f));
    SceneFrame frame;
    frame.index = f;
    frame.timestamp = f * spec.dt;
    const double t = frame.timestamp;
    frame.pose = EgoPose::from_xyz_yaw(spec.ego_speed * t, 0.0, 0.0, spec.ego_yaw_rate * t);
    frame.boxes = boxes;
    const Eigen::Matrix4d world_to_ego = frame.pose.inverse();

    const Index n = static_cast<Index>(spec.boxes) * spec.points_per_box + spec.ground_points;
    frame.points.points.resize(n, 4);
    frame.labels.resize(static_cast<std::size_t>(n));
    Index row = 0;
    for (int b = 0; b < spec.boxes; ++b) {
      const Eigen::Vector3d c = boxes[static_cast<std::size_t>(b)].center_at(t);
      for (int i = 0; i < spec.points_per_box; ++i, ++row) {
        const Eigen::Vector3d world = c + body[static_cast<std::size_t>(b)].row(i).transpose();
        frame.points.points.row(row).head<3>() = transform(world_to_ego, world).transpose();
        frame.points.points(row, 3) =
            box_intensity[static_cast<std::size_t>(b)][i] + spec.intensity_noise * noise.normal();
        frame.labels[static_cast<std::size_t>(row)] = b;
      }
    }
    for (int i = 0; i < spec.ground_points; ++i, ++row) {
      frame.points.points.row(row).head<3>() =
          transform(world_to_ego, ground.row(i).transpose()).transpose();
      frame.points.points(row, 3) = ground_intensity[i] + spec.intensity_noise * noise.normal();
      frame.labels[static_cast<std::size_t>(row)] = -1;
    }

    for (int cam = 0; cam < spec.cameras; ++cam) {
      CameraView view;
      auto& m = view.model;
      m.height = spec.raster_height;
      m.width = spec.raster_width;
      const double fx = 0.5 * spec.raster_width;  // 90 degree horizontal field of view
      m.intrinsics << fx, 0, 0.5 * spec.raster_width, 0, fx, 0.5 * spec.raster_height, 0, 0, 1;
      const double yaw = 2.0 * std::numbers::pi * cam / spec.cameras;
      m.extrinsics.setIdentity();
      m.extrinsics.topLeftCorner<3, 3>() =
          Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix() * camera_base();
      m.extrinsics.topRightCorner<3, 1>() = Eigen::Vector3d(0, 0, kCameraHeight);

      auto& r = view.raster;
      r.height = spec.raster_height;
      r.width = spec.raster_width;
      r.bins = bins;
      r.features.resize(r.pixels(), spec.channels);
      r.scores.resize(r.pixels(), bins.count());
      const Eigen::Matrix3d Kinv = m.intrinsics.inverse();
      const Eigen::Matrix4d cam_to_world = frame.pose.T * m.extrinsics;
      const Eigen::Vector3d origin = cam_to_world.topRightCorner<3, 1>();
      for (int v = 0; v < r.height; ++v) {
        for (int u = 0; u < r.width; ++u) {
          const Index px = static_cast<Index>(v) * r.width + u;
          const Eigen::Vector3d dir =
              cam_to_world.topLeftCorner<3, 3>() * (Kinv * Eigen::Vector3d(u + 0.5, v + 0.5, 1.0));
          // Depth along the optical axis; dir has unit forward component.
          std::optional<double> depth;
          int hit = -2;
          for (const auto& box : boxes) {
            const auto s = hit_box(origin, dir, box.center_at(t), box.size);
            if (s && (!depth || *s < *depth)) {
              depth = s;
              hit = box.id;
            }
          }
          if (!depth && dir.z() < -1e-12) {
            const double s = (kGroundZ - origin.z()) / dir.z();
            if (s > 0.0) {
              depth = s;
              hit = -1;
            }
          }
          if (depth) {
            for (Index b = 0; b < bins.count(); ++b) {
              const double z = (bins.center(b) - *depth) / bin_width;
              r.scores(px, b) = -0.5 * z * z;
            }
            const Eigen::VectorXd& sig =
                hit >= 0 ? signature[static_cast<std::size_t>(hit)] : ground_signature;
            r.features.row(px) = (sig + noise.normal_vector(spec.channels, 0.05)).transpose();
          } else {
            r.scores.row(px) = noise.normal_vector(bins.count(), 0.1).transpose();
            r.features.row(px) = noise.normal_vector(spec.channels, 0.05).transpose();
          }
        }
      }
      frame.cameras.push_back(std::move(view));
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

std::vector<Eigen::Vector3d> box_centers_ego(const SceneFrame& frame) {
  const Eigen::Matrix4d world_to_ego = frame.pose.inverse();
  std::vector<Eigen::Vector3d> out;
  for (const auto& b : frame.boxes) out.push_back(transform(world_to_ego, b.center_at(frame.timestamp)));
  return out;
}

namespace {

json vec3(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d vec3_from(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace

json SceneFrame::to_json() const {
  json cams = json::array();
  for (const auto& c : cameras) {
    cams.push_back({{"model",
                     {{"intrinsics", matrix_to_json(c.model.intrinsics)},
                      {"extrinsics", matrix_to_json(c.model.extrinsics)},
                      {"height", c.model.height},
                      {"width", c.model.width}}},
                    {"raster",
                     {{"height", c.raster.height},
                      {"width", c.raster.width},
                      {"bin_edges", c.raster.bins.edges},
                      {"features", matrix_to_json(c.raster.features)},
                      {"scores", matrix_to_json(c.raster.scores)}}}});
  }
  json bx = json::array();
  for (const auto& b : boxes)
    bx.push_back({{"id", b.id}, {"center", vec3(b.center)}, {"size", vec3(b.size)},
                  {"velocity", vec3(b.velocity)}});
  return {{"index", index},
          {"timestamp", timestamp},
          {"pose", matrix_to_json(pose.T)},
          {"points", matrix_to_json(points.points)},
          {"labels", labels},
          {"cameras", std::move(cams)},
          {"boxes", std::move(bx)}};
}

SceneFrame SceneFrame::from_json(const json& j) {
  try {
    SceneFrame f;
    f.index = j.value("index", 0);
    f.timestamp = j.at("timestamp").get<double>();
    f.pose.T = matrix_from_json(j.at("pose"));
    f.pose.validate();
    f.points.points = matrix_from_json(j.at("points"), 4);
    f.labels = j.value("labels", std::vector<int>(static_cast<std::size_t>(f.points.size()), -1));
    for (const auto& c : j.value("cameras", json::array())) {
      CameraView v;
      const auto& m = c.at("model");
      v.model.intrinsics = matrix_from_json(m.at("intrinsics"));
      v.model.extrinsics = matrix_from_json(m.at("extrinsics"));
      v.model.height = m.at("height").get<int>();
      v.model.width = m.at("width").get<int>();
      const auto& r = c.at("raster");
      v.raster.height = r.at("height").get<int>();
      v.raster.width = r.at("width").get<int>();
      v.raster.bins.edges = r.at("bin_edges").get<std::vector<double>>();
      v.raster.features = matrix_from_json(r.at("features"));
      v.raster.scores = matrix_from_json(r.at("scores"));
      f.cameras.push_back(std::move(v));
    }
    for (const auto& b : j.value("boxes", json::array()))
      f.boxes.push_back({b.at("id").get<int>(), vec3_from(b.at("center")), vec3_from(b.at("size")),
                         vec3_from(b.at("velocity"))});
    return f;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene frame: ") + e.what());
  }
}

}  // namespace unilion
