#pragma once

// Harness commands behind the `unilion` executable. Each returns a process
// exit code: 0 success, 1 invariant or check failure, 2 configuration error.

#include "unilion/config.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

namespace unilion {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

struct CommandOptions {
  std::optional<std::filesystem::path> config;  // defaults apply when absent
  std::optional<std::uint64_t> seed;            // overrides the config seed
  std::filesystem::path out = ".";
  std::optional<std::filesystem::path> scenes;      // forward: frame_*.json directory
  std::optional<std::filesystem::path> checkpoint;  // forward: trained weights
  std::optional<std::string> modalities;            // forward: L, LT, LC or LCT
};

RunConfig resolve_config(const CommandOptions& o);

// Writes frame_NNN.json per synthetic frame.
int cmd_gen(const CommandOptions& o, std::ostream& log);
// Writes bev_NNN.json per frame and report.json with the invariant checks.
int cmd_forward(const CommandOptions& o, std::ostream& log);
// Writes gradcheck.json.
int cmd_gradcheck(const CommandOptions& o, std::ostream& log);
// Writes bench.csv and bench_scaling.json.
int cmd_bench(const CommandOptions& o, std::ostream& log);
// Writes train_log.jsonl (one line per step) and checkpoint.json.
int cmd_train(const CommandOptions& o, std::ostream& log);

// Dispatches by name and maps exceptions to kExitConfig.
int run_command(const std::string& name, const CommandOptions& o, std::ostream& log,
                std::ostream& err);

}  // namespace unilion
