#pragma once

// Flat `key = value` run configuration. Lines starting with '#' are comments;
// unknown keys and malformed values raise ConfigError.

#include "unilion/backbone.hpp"
#include "unilion/scene.hpp"
#include "unilion/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace unilion {

// Which inputs a run consumes: L, LT, LC or LCT.
struct Availability {
  bool lidar = true;
  bool camera = true;
  bool temporal = true;

  static Availability parse(const std::string& s);  // throws ConfigError
  std::string name() const;
  friend bool operator==(const Availability&, const Availability&) = default;
};

enum class Precision { Double, Float };

struct RunConfig {
  std::uint64_t seed = 0;
  VoxelGrid grid;
  Index channels = 8;
  Index blocks = 2;
  int window_xy = 7;
  int window_z = 8;
  std::vector<Index> group_sizes{256, 128};
  ScanKind op = ScanKind::Selective;
  double ratio = 0.2;
  Index topk = kDefaultTopK;
  Index map_classes = 3;
  Availability modalities;
  Precision precision = Precision::Double;
  SceneSpec scene;

  int train_steps = 200;
  double train_lr = 0.01;
  std::vector<std::string> train_tasks{"det", "occ"};

  Index gradcheck_directions = 64;
  double gradcheck_eps = 1e-5;

  std::vector<Index> bench_lengths{1024, 2048, 4096};
  Index bench_channels = 32;
  int bench_repeats = 15;
  Index bench_chunk = 64;

  RunConfig();

  BackboneConfig backbone() const;
  void validate() const;  // throws ConfigError

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

}  // namespace unilion
