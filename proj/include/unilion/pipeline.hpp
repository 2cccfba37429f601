#pragma once

// End-to-end model: encoders, fusion, backbone and toy heads, run under any
// input availability regime with one set of weights; plus toy training.

#include "unilion/backbone.hpp"
#include "unilion/config.hpp"
#include "unilion/fusion.hpp"
#include "unilion/scene.hpp"
#include "unilion/tasks.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace unilion {

inline constexpr Index kLidarAttributes = 1;  // intensity

struct Model {
  BackboneConfig backbone;
  BackboneParams params;
  HeadParams heads;
  Index topk = kDefaultTopK;

  static Model init(const RunConfig& cfg, std::uint64_t seed);

  // Views into this object; invalidated if the model is moved or copied.
  std::vector<ad::ParamSlot> slots();

  nlohmann::json checkpoint() const;
  // Copies values by slot name; throws ConfigError on missing or resized slots.
  void restore(const nlohmann::json& checkpoint);
};

// Encodes one frame into backbone tokens: VFE on LiDAR voxels, lifted camera
// voxels, modality merge, then temporal merge with `bank` (when given and
// the regime includes T), which is updated with this frame's merged tokens.
SparseVar encode_frame(ad::Tape& t, const SceneFrame& frame, const Model& model,
                       const Availability& regime, const VoxelGrid& grid, MemoryBank* bank);

struct ForwardResult {
  DenseBEV bev;
  BackboneTrace trace;
  Index lidar_voxels = 0;
  Index camera_voxels = 0;
  Index fused_voxels = 0;
  std::vector<std::string> failures;  // violated structural invariants

  nlohmann::json report() const;
};

// Streams the frames in order through one memory bank.
std::vector<ForwardResult> run_stream(std::span<const SceneFrame> frames, const Model& model,
                                      const Availability& regime, const VoxelGrid& grid);

std::vector<std::string> check_invariants(const ForwardResult& r, const Model& model,
                                          const VoxelGrid& grid);

// Toy targets on the BEV cells of `bev_grid` for the requested tasks.
TaskTargets make_targets(const SceneFrame& frame, const SceneSpec& spec, const VoxelGrid& bev_grid,
                         const std::vector<std::string>& tasks, Index map_classes);

struct StepLog {
  int step = 0;
  double total = 0.0;
  TaskLosses losses;

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<StepLog> curve;
  nlohmann::json checkpoint;
};

// Adam on a fixed synthetic scene. Every step replays the first frames
// without gradients to fill the memory bank and trains on the last frame.
TrainResult train(const RunConfig& cfg, std::uint64_t seed,
                  const std::function<void(const StepLog&)>& on_step = {});

}  // namespace unilion
