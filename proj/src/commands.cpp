#include "unilion/commands.hpp"

#include "unilion/diagnostics.hpp"
#include "unilion/io.hpp"
#include "unilion/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace unilion {

namespace fs = std::filesystem;

namespace {

std::string numbered(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu%s", stem, i, ext);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

std::vector<SceneFrame> load_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("scenes directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("frame_", 0) == 0 && e.path().extension() == ".json")
      files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SceneFrame> frames;
  for (const auto& f : files) {
    json j;
    try {
      j = json::parse(read_file(f));
    } catch (const json::exception& e) {
      throw ConfigError(f.string() + ": " + e.what());
    }
    frames.push_back(SceneFrame::from_json(j));
  }
  return frames;
}

}  // namespace

RunConfig resolve_config(const CommandOptions& o) {
  RunConfig cfg = o.config ? RunConfig::load(*o.config) : RunConfig();
  if (o.seed) cfg.seed = *o.seed;
  if (o.modalities) cfg.modalities = Availability::parse(*o.modalities);
  cfg.validate();
  return cfg;
}

int cmd_gen(const CommandOptions& o, std::ostream& log) {
  const RunConfig cfg = resolve_config(o);
  const auto frames = generate_scene(cfg.scene, cfg.seed);
  ensure_dir(o.out);
  for (std::size_t i = 0; i < frames.size(); ++i)
    write_file_atomic(o.out / numbered("frame", i, ".json"), frames[i].to_json().dump() + "\n");
  log << "gen: wrote " << frames.size() << " frame(s) to " << o.out.string() << "\n";
  return kExitOk;
}

int cmd_forward(const CommandOptions& o, std::ostream& log) {
  const RunConfig cfg = resolve_config(o);
  const std::vector<SceneFrame> frames =
      o.scenes ? load_frames(*o.scenes) : generate_scene(cfg.scene, cfg.seed);
  for (const auto& f : frames) {
    if (cfg.modalities.camera && f.cameras.empty())
      throw ConfigError("forward: camera input enabled but frame " + std::to_string(f.index) +
                        " has no cameras");
    for (const auto& c : f.cameras) c.raster.validate(cfg.topk);
  }
  Model model = Model::init(cfg, cfg.seed);
  if (o.checkpoint) {
    try {
      model.restore(json::parse(read_file(*o.checkpoint)));
    } catch (const json::exception& e) {
      throw ConfigError("checkpoint: " + std::string(e.what()));
    }
  }

  const auto results = run_stream(frames, model, cfg.modalities, cfg.grid);
  ensure_dir(o.out);
  json report = {{"modalities", cfg.modalities.name()}, {"seed", cfg.seed}, {"frames", json::array()}};
  bool ok = true;
  for (std::size_t i = 0; i < results.size(); ++i) {
    json bev = results[i].bev.to_json();
    bev["frame"] = frames[i].index;
    write_file_atomic(o.out / numbered("bev", i, ".json"), bev.dump() + "\n");
    json r = results[i].report();
    r["frame"] = frames[i].index;
    report["frames"].push_back(std::move(r));
    ok = ok && results[i].failures.empty();
    for (const auto& f : results[i].failures) log << "forward: frame " << i << ": " << f << "\n";
  }
  report["invariants_ok"] = ok;
  write_file_atomic(o.out / "report.json", report.dump(2) + "\n");
  log << "forward: " << results.size() << " frame(s), regime " << cfg.modalities.name()
      << ", invariants " << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kExitOk : kExitFailure;
}

int cmd_gradcheck(const CommandOptions& o, std::ostream& log) {
  const RunConfig cfg = resolve_config(o);
  const GradcheckSummary s = run_gradcheck(cfg, cfg.seed);
  ensure_dir(o.out);
  write_file_atomic(o.out / "gradcheck.json", s.to_json().dump(2) + "\n");
  for (const auto* list : {&s.suite.ops, &s.suite.composites})
    for (const auto& r : *list)
      log << "gradcheck: " << r.op << " max_rel_error " << r.report.max_rel_error() << "\n";
  log << "gradcheck: end_to_end max_rel_error " << s.end_to_end.max_rel_error() << " over "
      << s.end_to_end.directions << " directions\n";
  log << "gradcheck: " << (s.passed() ? "PASS" : "FAIL") << "\n";
  return s.passed() ? kExitOk : kExitFailure;
}

int cmd_bench(const CommandOptions& o, std::ostream& log) {
  const RunConfig cfg = resolve_config(o);
  BenchOptions b;
  b.lengths = cfg.bench_lengths;
  b.channels = cfg.bench_channels;
  b.repeats = cfg.bench_repeats;
  b.chunk = cfg.bench_chunk;
  b.precision = cfg.precision;
  const auto rows = run_bench(b, cfg.seed);
  ensure_dir(o.out);
  write_file_atomic(o.out / "bench.csv", bench_csv(rows));
  json scaling = json::array();
  for (const auto& s : bench_scaling(rows)) {
    scaling.push_back({{"operator", s.op}, {"time_ratios", s.time_ratios}, {"macs_linear", s.macs_linear}});
    log << "bench: " << s.op << " time ratios";
    for (double r : s.time_ratios) log << " " << r;
    log << (s.macs_linear ? " (macs linear)" : "") << "\n";
  }
  write_file_atomic(o.out / "bench_scaling.json", scaling.dump(2) + "\n");
  return kExitOk;
}

int cmd_train(const CommandOptions& o, std::ostream& log) {
  const RunConfig cfg = resolve_config(o);
  ensure_dir(o.out);
  std::ostringstream lines;
  const TrainResult r = train(cfg, cfg.seed, [&](const StepLog& s) {
    lines << s.to_json().dump() << "\n";
    if (s.step % 20 == 0) log << "train: step " << s.step << " total " << s.total << "\n";
  });
  write_file_atomic(o.out / "train_log.jsonl", lines.str());
  write_file_atomic(o.out / "checkpoint.json", r.checkpoint.dump() + "\n");
  if (!r.curve.empty())
    log << "train: initial " << r.curve.front().total << " final " << r.curve.back().total << "\n";
  return kExitOk;
}

int run_command(const std::string& name, const CommandOptions& o, std::ostream& log,
                std::ostream& err) {
  try {
    if (name == "gen") return cmd_gen(o, log);
    if (name == "forward") return cmd_forward(o, log);
    if (name == "gradcheck") return cmd_gradcheck(o, log);
    if (name == "bench") return cmd_bench(o, log);
    if (name == "train") return cmd_train(o, log);
    err << "unknown command: " << name << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << name << ": error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace unilion
