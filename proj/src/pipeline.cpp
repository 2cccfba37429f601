#include "unilion/pipeline.hpp"

#include <cmath>
#include <unordered_set>

namespace unilion {

Model Model::init(const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Rng backbone_rng = rng.fork(11);
  Rng head_rng = rng.fork(12);
  Model m;
  m.backbone = cfg.backbone();
  m.params = init_backbone(m.backbone, voxel_feature_channels(kLidarAttributes), backbone_rng);
  m.heads = HeadParams::init(cfg.channels, cfg.map_classes, head_rng);
  m.topk = cfg.topk;
  return m;
}

std::vector<ad::ParamSlot> Model::slots() {
  std::vector<ad::ParamSlot> out = param_slots(params);
  for (auto& s : param_slots(heads)) out.push_back(std::move(s));
  return out;
}

nlohmann::json Model::checkpoint() const {
  nlohmann::json params_json = nlohmann::json::object();
  for (const auto& s : const_cast<Model*>(this)->slots())
    params_json[s.name] = std::vector<double>(s.data, s.data + s.size);
  return {{"format", "unilion-checkpoint-1"}, {"params", std::move(params_json)}};
}

void Model::restore(const nlohmann::json& checkpoint) {
  const auto& p = checkpoint.at("params");
  for (auto& s : slots()) {
    if (!p.contains(s.name)) throw ConfigError("checkpoint: missing parameter " + s.name);
    const auto values = p.at(s.name).get<std::vector<double>>();
    if (static_cast<Index>(values.size()) != s.size)
      throw ConfigError("checkpoint: size mismatch for " + s.name);
    std::copy(values.begin(), values.end(), s.data);
  }
}

SparseVar encode_frame(ad::Tape& t, const SceneFrame& frame, const Model& model,
                       const Availability& regime, const VoxelGrid& grid, MemoryBank* bank) {
  const Index C = model.backbone.channels;
  std::vector<SparseVar> parts;
  if (regime.lidar) {
    const SparseFeatureSetd raw = voxelize(frame.points, grid);
    parts.push_back(vfe(t, constant(t, raw), model.params.vfe));
  }
  if (regime.camera) {
    const SparseFeatureSetd cam = lift_cameras(frame.cameras, grid, C, model.topk);
    parts.push_back(constant(t, cam));
  }
  if (parts.empty()) throw ConfigError("encode_frame: regime enables no sensor");
  SparseVar cur = parts.size() == 1 ? parts[0] : merge_union(t, parts);

  if (!regime.temporal || bank == nullptr) return cur;
  std::vector<SparseVar> stack{cur};
  for (const auto& e : bank->entries())
    stack.push_back(constant(t, align_temporal(e.set, e.pose, frame.pose, grid)));
  bank->push(value(t, cur), frame.pose);
  return stack.size() == 1 ? cur : merge_union(t, stack);
}

nlohmann::json ForwardResult::report() const {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : trace.stages) stages.push_back({{"stage", s.stage}, {"voxels", s.voxels}});
  return {{"lidar_voxels", lidar_voxels}, {"camera_voxels", camera_voxels},
          {"fused_voxels", fused_voxels}, {"stages", std::move(stages)},
          {"bev_shape", {bev.batches, bev.H, bev.W, bev.C}},
          {"invariants_ok", failures.empty()}, {"failures", failures}};
}

std::vector<std::string> check_invariants(const ForwardResult& r, const Model& model,
                                          const VoxelGrid& grid) {
  std::vector<std::string> f;
  const VoxelGrid g = final_grid(grid, model.backbone);
  if (r.bev.H != g.extent.x() || r.bev.W != g.extent.y() || r.bev.C != model.backbone.channels ||
      r.bev.data.rows() != r.bev.batches * r.bev.H * r.bev.W)
    f.push_back("bev shape differs from (H, W, C) of the grid");
  if (!r.bev.data.allFinite()) f.push_back("bev contains non-finite values");
  if (r.fused_voxels < std::max(r.lidar_voxels, r.camera_voxels))
    f.push_back("fused token count below a single modality's count");

  const auto& st = r.trace.stages;
  for (std::size_t i = 1; i < st.size(); ++i) {
    const std::string& name = st[i].stage;
    const Index before = st[i - 1].voxels;
    const Index now = st[i].voxels;
    const auto ends_with = [&](const std::string& suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".generate") && now < before) f.push_back(name + ": voxel count decreased");
    if (ends_with(".block") && now != before) f.push_back(name + ": block changed the voxel set");
    if (ends_with(".height_merge") && now > before) f.push_back(name + ": merge increased voxel count");
  }
  for (const auto& gen : r.trace.generated) {
    std::unordered_set<VoxelCoord, VoxelCoordHash> seen;
    for (const auto& c : gen)
      if (!seen.insert(c).second) f.push_back("duplicate generated voxel");
  }
  return f;
}

std::vector<ForwardResult> run_stream(std::span<const SceneFrame> frames, const Model& model,
                                      const Availability& regime, const VoxelGrid& grid) {
  MemoryBank bank;
  std::vector<ForwardResult> out;
  for (const auto& frame : frames) {
    ad::Tape t(false);
    ForwardResult r;
    if (regime.lidar) r.lidar_voxels = voxelize(frame.points, grid).size();
    if (regime.camera)
      r.camera_voxels = lift_cameras(frame.cameras, grid, model.backbone.channels, model.topk).size();
    const SparseVar x = encode_frame(t, frame, model, regime, grid, &bank);
    r.fused_voxels = x.size();
    const ad::Var bev = backbone_forward(t, x, model.backbone, model.params, &r.trace);
    r.bev = to_bev(final_grid(grid, model.backbone), batch_count(x.coords), t.value(bev));
    r.failures = check_invariants(r, model, grid);
    out.push_back(std::move(r));
  }
  return out;
}

TaskTargets make_targets(const SceneFrame& frame, const SceneSpec& spec, const VoxelGrid& bev_grid,
                         const std::vector<std::string>& tasks, Index map_classes) {
  const Index H = bev_grid.extent.x();
  const Index W = bev_grid.extent.y();
  const Index cells = H * W;
  const auto has = [&](const char* name) {
    return std::find(tasks.begin(), tasks.end(), name) != tasks.end();
  };
  const auto cell_of = [&](double x, double y) -> std::optional<std::pair<Index, Index>> {
    const double fx = std::floor((x - bev_grid.origin.x()) / bev_grid.voxel_size.x());
    const double fy = std::floor((y - bev_grid.origin.y()) / bev_grid.voxel_size.y());
    if (fx < 0 || fy < 0 || fx >= static_cast<double>(H) || fy >= static_cast<double>(W)) return std::nullopt;
    return std::pair<Index, Index>{static_cast<Index>(fx), static_cast<Index>(fy)};
  };
  const auto cell_center = [&](Index ix, Index iy) {
    return Eigen::Vector3d(bev_grid.origin.x() + (ix + 0.5) * bev_grid.voxel_size.x(),
                           bev_grid.origin.y() + (iy + 0.5) * bev_grid.voxel_size.y(), 0.0);
  };
  const Eigen::Matrix4d& ego_to_world = frame.pose.T;
  const auto centers = box_centers_ego(frame);
  // Box whose world footprint contains the cell center, or -1.
  const auto footprint = [&](Index ix, Index iy) {
    const Eigen::Vector3d p = cell_center(ix, iy);
    const Eigen::Vector3d w = ego_to_world.topLeftCorner<3, 3>() * p + ego_to_world.topRightCorner<3, 1>();
    for (const auto& b : frame.boxes) {
      const Eigen::Vector3d c = b.center_at(frame.timestamp);
      if (std::abs(w.x() - c.x()) <= 0.5 * b.size.x() && std::abs(w.y() - c.y()) <= 0.5 * b.size.y())
        return b.id;
    }
    return -1;
  };

  TaskTargets t;
  if (has("det")) {
    Eigen::MatrixXd heat = Eigen::MatrixXd::Zero(cells, 1);
    const double sigma = 1.0;
    for (const auto& c : centers) {
      const auto cell = cell_of(c.x(), c.y());
      if (!cell) continue;
      for (Index ix = 0; ix < H; ++ix)
        for (Index iy = 0; iy < W; ++iy) {
          const double dx = static_cast<double>(ix - cell->first);
          const double dy = static_cast<double>(iy - cell->second);
          const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          heat(ix * W + iy, 0) = std::max(heat(ix * W + iy, 0), v);
        }
    }
    t.heatmap = std::move(heat);
  }
  if (has("occ")) {
    Eigen::MatrixXd occ = Eigen::MatrixXd::Zero(cells, 1);
    for (Index i = 0; i < frame.points.size(); ++i) {
      const Eigen::Vector3d p = frame.points.points.row(i).head<3>().transpose();
      if (const auto v = bev_grid.locate(p)) occ(static_cast<Index>(v->x) * W + v->y, 0) = 1.0;
    }
    t.occupancy = std::move(occ);
  }
  if (has("map")) {
    std::vector<int> labels(static_cast<std::size_t>(cells), 0);
    for (Index ix = 0; ix < H; ++ix)
      for (Index iy = 0; iy < W; ++iy) {
        const Eigen::Vector3d p = cell_center(ix, iy);
        const Eigen::Vector3d w = ego_to_world.topLeftCorner<3, 3>() * p + ego_to_world.topRightCorner<3, 1>();
        int label = std::abs(w.y()) < 1.5 ? 1 : 0;
        if (footprint(ix, iy) >= 0) label = 2;
        labels[static_cast<std::size_t>(ix * W + iy)] = static_cast<int>(std::min<Index>(label, map_classes - 1));
      }
    t.map_labels = std::move(labels);
  }
  if (has("mot")) {
    Eigen::MatrixXd mot = Eigen::MatrixXd::Zero(cells, 2);
    t.motion_mask.assign(static_cast<std::size_t>(cells), 0);
    const Eigen::Matrix3d world_to_ego_R = ego_to_world.topLeftCorner<3, 3>().transpose();
    for (Index ix = 0; ix < H; ++ix)
      for (Index iy = 0; iy < W; ++iy) {
        const int id = footprint(ix, iy);
        if (id < 0) continue;
        const Eigen::Vector3d v = world_to_ego_R * frame.boxes[static_cast<std::size_t>(id)].velocity * spec.dt;
        mot.row(ix * W + iy) << v.x(), v.y();
        t.motion_mask[static_cast<std::size_t>(ix * W + iy)] = 1;
      }
    t.motion = std::move(mot);
  }
  if (has("plan")) {
    const double tn = frame.timestamp + spec.dt;
    const EgoPose next = EgoPose::from_xyz_yaw(spec.ego_speed * tn, 0.0, 0.0, spec.ego_yaw_rate * tn);
    const Eigen::Matrix4d rel = frame.pose.inverse() * next.T;
    Eigen::MatrixXd plan(1, 2);
    plan << rel(0, 3), rel(1, 3);
    t.plan = std::move(plan);
  }
  return t;
}

nlohmann::json StepLog::to_json() const {
  return {{"step", step}, {"total", total}, {"losses", losses.to_json()}};
}

namespace {

bool is_wkv_decay(const std::string& name) {
  return name.find(".scan_") != std::string::npos && name.size() >= 2 &&
         name.compare(name.size() - 2, 2, ".w") == 0;
}

struct Adam {
  double lr = 0.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;
  std::vector<Eigen::VectorXd> m, v;

  void step(std::vector<ad::ParamSlot>& slots, const std::vector<Eigen::VectorXd>& grads) {
    if (m.empty())
      for (const auto& s : slots) {
        m.push_back(Eigen::VectorXd::Zero(s.size));
        v.push_back(Eigen::VectorXd::Zero(s.size));
      }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < slots.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i].cwiseProduct(grads[i]);
      Eigen::Map<Eigen::VectorXd> p(slots[i].data, slots[i].size);
      p.array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
      if (is_wkv_decay(slots[i].name)) p = p.cwiseMax(0.0);
    }
  }
};

}  // namespace

TrainResult train(const RunConfig& cfg, std::uint64_t seed,
                  const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  const std::vector<SceneFrame> frames = generate_scene(cfg.scene, seed);
  if (frames.empty()) throw ConfigError("train: scene.frames must be >= 1");
  Model model = Model::init(cfg, seed);
  std::vector<ad::ParamSlot> slots = model.slots();
  const VoxelGrid bev_grid = final_grid(cfg.grid, model.backbone);
  const TaskTargets targets =
      make_targets(frames.back(), cfg.scene, bev_grid, cfg.train_tasks, cfg.map_classes);

  Adam adam;
  adam.lr = cfg.train_lr;
  TrainResult result;
  for (int step = 0; step < cfg.train_steps; ++step) {
    MemoryBank bank;
    for (std::size_t f = 0; f + 1 < frames.size(); ++f) {
      ad::Tape warm(false);
      encode_frame(warm, frames[f], model, cfg.modalities, cfg.grid, &bank);
    }
    ad::Tape t(true);
    const SparseVar x = encode_frame(t, frames.back(), model, cfg.modalities, cfg.grid, &bank);
    const ad::Var bev = backbone_forward(t, x, model.backbone, model.params);
    const TaskVars vars = toy_heads(t, bev, model.heads, targets);
    const ad::Var loss = total_loss(t, vars);

    StepLog log{step, t.value(loss)(0, 0), values(t, vars)};
    if (on_step) on_step(log);
    result.curve.push_back(log);

    t.backward(loss);
    std::vector<Eigen::VectorXd> grads;
    for (const auto& s : slots) {
      if (t.has_param(s.key)) {
        const Eigen::MatrixXd g = t.grad_of(s.key);
        grads.emplace_back(Eigen::Map<const Eigen::VectorXd>(g.data(), g.size()));
      } else {
        grads.push_back(Eigen::VectorXd::Zero(s.size));
      }
    }
    adam.step(slots, grads);
  }
  result.checkpoint = model.checkpoint();
  return result;
}

}  // namespace unilion
