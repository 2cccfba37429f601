#pragma once

// UniLION layer, 3D spatial feature descriptor, hierarchical block, voxel
// generation and the N-block backbone ending in a dense BEV grid.
//
// Every stage has a tape form (used for training and gradient checks) and a
// plain form that runs the same code on a non-recording tape.

#include "unilion/autodiff.hpp"
#include "unilion/linrnn.hpp"
#include "unilion/partition.hpp"
#include "unilion/rng.hpp"
#include "unilion/sparse_ops.hpp"
#include "unilion/voxel.hpp"

#include <json.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace unilion {

struct LayerConfig {
  WindowShape window{13, 13, 32};
  Index group_size = 4096;
  ScanKind op = ScanKind::Selective;
  Index channels = 16;
};

// Layers 0..3 run at 1x, 1/2x, 1/4x, 1/2x resolution.
struct BlockConfig {
  std::array<LayerConfig, 4> layers;
  Eigen::Vector3i merge_half{2, 2, 2};
  Eigen::Vector3i merge_quarter{2, 2, 2};
};

inline std::vector<Eigen::Vector3i> default_generation_offsets() {
  return {{-1, -1, 0}, {1, 1, 0}, {1, -1, 0}, {-1, 1, 0}};
}

struct BackboneConfig {
  Index channels = 16;
  std::vector<BlockConfig> blocks;
  Eigen::Vector3i height_stride{1, 1, 2};
  double ratio = 0.2;
  std::vector<Eigen::Vector3i> offsets = default_generation_offsets();

  // N blocks sharing one operator; block i uses window z = z0 / 2^i (at
  // least 1) and group size group_sizes[i % size].
  static BackboneConfig uniform(Index blocks, Index channels, int window_xy, int window_z0,
                                std::vector<Index> group_sizes, ScanKind op);

  void validate() const;  // throws ConfigError
};

// --- parameters -------------------------------------------------------------

struct VfeParams {
  Eigen::MatrixXd W1;  // C x raw
  Eigen::VectorXd b1;
  Eigen::MatrixXd W2;  // C x C
  Eigen::VectorXd b2;
};

struct NormParams {
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
};

struct LayerParams {
  NormParams norm_x, norm_y;
  ScanOperator<double> scan_x, scan_y;
};

struct DescriptorParams {
  Eigen::MatrixXd weights;  // (27 C) x C, see ConvKernel3
  Eigen::VectorXd bias;
  NormParams norm;
};

struct BlockParams {
  std::array<LayerParams, 4> layers;
  std::array<DescriptorParams, 3> descriptors;
};

struct ScorerParams {
  Eigen::MatrixXd w;  // 1 x C
  Eigen::VectorXd b;  // 1
};

struct BackboneParams {
  VfeParams vfe;
  std::vector<ScorerParams> scorers;  // one per block
  std::vector<BlockParams> blocks;
};

NormParams init_norm(Index channels);
VfeParams init_vfe(Index raw_channels, Index channels, Rng& rng);
LayerParams init_layer(const LayerConfig& cfg, Rng& rng);
DescriptorParams init_descriptor(Index channels, Rng& rng);
BackboneParams init_backbone(const BackboneConfig& cfg, Index raw_channels, Rng& rng);

// Named views of every trainable array, in a fixed order.
std::vector<ad::ParamSlot> param_slots(VfeParams& p, const std::string& prefix = "vfe");
std::vector<ad::ParamSlot> param_slots(LayerParams& p, const std::string& prefix);
std::vector<ad::ParamSlot> param_slots(DescriptorParams& p, const std::string& prefix);
std::vector<ad::ParamSlot> param_slots(BlockParams& p, const std::string& prefix);
std::vector<ad::ParamSlot> param_slots(BackboneParams& p);

// --- tape forms -------------------------------------------------------------

struct SparseVar {
  std::vector<VoxelCoord> coords;
  ad::Var features;
  VoxelGrid grid;

  Index size() const { return static_cast<Index>(coords.size()); }
};

SparseVar constant(ad::Tape& t, const SparseFeatureSetd& set);
SparseFeatureSetd value(const ad::Tape& t, const SparseVar& v);

SparseVar vfe(ad::Tape& t, const SparseVar& raw, const VfeParams& p);
SparseVar unilion_layer(ad::Tape& t, const SparseVar& x, const LayerConfig& cfg,
                        const LayerParams& p);
SparseVar descriptor(ad::Tape& t, const SparseVar& x, const DescriptorParams& p);
SparseVar unilion_block(ad::Tape& t, const SparseVar& x, const BlockConfig& cfg,
                        const BlockParams& p);
SparseVar voxel_generate(ad::Tape& t, const SparseVar& x, std::span<const VoxelCoord> pm,
                         std::span<const Eigen::Vector3i> offsets);

// Dense bird's-eye view: row (b * H + x) * W + y holds the z-sum of features.
struct DenseBEV {
  Index H = 0, W = 0, C = 0, batches = 1;
  Eigen::MatrixXd data;

  double at(Index x, Index y, Index c, Index batch = 0) const {
    return data((batch * H + x) * W + y, c);
  }
  nlohmann::json to_json() const;
};

struct StageCount {
  std::string stage;
  Index voxels = 0;
};

struct BackboneTrace {
  std::vector<StageCount> stages;
  std::vector<std::vector<VoxelCoord>> generated;  // per block
  void add(std::string stage, Index voxels) { stages.push_back({std::move(stage), voxels}); }
};

ad::Var flatten_bev(ad::Tape& t, const SparseVar& x, Index batches);

// Runs the N blocks on an already encoded (post-VFE, fused) set and returns
// the BEV node, (batches * H * W) x C.
ad::Var backbone_forward(ad::Tape& t, const SparseVar& x, const BackboneConfig& cfg,
                         const BackboneParams& p, BackboneTrace* trace = nullptr);

// --- plain forms ------------------------------------------------------------

SparseFeatureSetd vfe(const SparseFeatureSetd& raw, const VfeParams& p);
SparseFeatureSetd unilion_layer(const SparseFeatureSetd& x, const LayerConfig& cfg,
                                const LayerParams& p);
SparseFeatureSetd descriptor(const SparseFeatureSetd& x, const DescriptorParams& p);
SparseFeatureSetd unilion_block(const SparseFeatureSetd& x, const BlockConfig& cfg,
                                const BlockParams& p);

// Rows chosen by a linear scorer: the ceil(r L) highest scores, ties to the
// lower row. Returned in ascending row order.
std::vector<Index> select_foreground(const Eigen::MatrixXd& features, const ScorerParams& p,
                                     double ratio);
std::vector<VoxelCoord> select_foreground(const SparseFeatureSetd& set, const ScorerParams& p,
                                          double ratio);

// Row sources of the generated set: an input row, or -1 for a new
// zero-initialized voxel. Coordinates come out canonical.
struct GenerationPlan {
  std::vector<VoxelCoord> coords;
  std::vector<Index> source;
  std::vector<VoxelCoord> generated;
};

GenerationPlan plan_generation(std::span<const VoxelCoord> coords, const VoxelGrid& grid,
                               std::span<const VoxelCoord> pm,
                               std::span<const Eigen::Vector3i> offsets);

SparseFeatureSetd voxel_generate(const SparseFeatureSetd& set, std::span<const VoxelCoord> pm,
                                 std::span<const Eigen::Vector3i> offsets);
SparseFeatureSetd voxel_generate(const SparseFeatureSetd& set, std::span<const VoxelCoord> pm);

DenseBEV backbone_forward(const SparseFeatureSetd& x, const BackboneConfig& cfg,
                          const BackboneParams& p, BackboneTrace* trace = nullptr);

DenseBEV to_bev(const VoxelGrid& final_grid, Index batches, const Eigen::MatrixXd& data);
// Grid after N height merges.
VoxelGrid final_grid(const VoxelGrid& input, const BackboneConfig& cfg);
Index batch_count(std::span<const VoxelCoord> coords);

}  // namespace unilion
