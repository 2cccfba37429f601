#include "unilion/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Sparse voxel backbone harness"};
  app.require_subcommand(1);

  unilion::CommandOptions opts;
  std::string config, out = ".", scenes, checkpoint, modalities;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "flat key = value config file");
    sub->add_option("--seed", seed, "RNG seed, overrides the config");
    sub->add_option("--out", out, "output directory");
    return sub;
  };
  common(app.add_subcommand("gen", "write synthetic scene frames"));
  auto* fwd = common(app.add_subcommand("forward", "run the backbone and check invariants"));
  fwd->add_option("--scenes", scenes, "directory of frame_*.json (default: generate)");
  fwd->add_option("--checkpoint", checkpoint, "weights written by train");
  fwd->add_option("--modalities", modalities, "L, LT, LC or LCT (overrides the config)");
  common(app.add_subcommand("gradcheck", "finite-difference gradient checks"));
  common(app.add_subcommand("bench", "scan vs attention timing table"));
  common(app.add_subcommand("train", "toy multi-task training"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : unilion::kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (!config.empty()) opts.config = config;
  if (sub->count("--seed") > 0) opts.seed = seed;
  opts.out = out;
  if (!scenes.empty()) opts.scenes = scenes;
  if (!checkpoint.empty()) opts.checkpoint = checkpoint;
  if (!modalities.empty()) opts.modalities = modalities;
  return unilion::run_command(sub->get_name(), opts, std::cout, std::cerr);
}
