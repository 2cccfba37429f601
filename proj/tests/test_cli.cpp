#include <doctest.h>

#include "unilion/commands.hpp"
#include "unilion/diagnostics.hpp"
#include "unilion/io.hpp"
#include "unilion/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace unilion;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unilion_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> listing(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

RunConfig small_config() {
  RunConfig c = RunConfig::parse(
      "grid.extent = 16,16,8\n"
      "grid.origin = -2.4,-2.4,-1.0\n"
      "scene.frames = 3\n"
      "scene.boxes = 2\n"
      "scene.points_per_box = 40\n"
      "scene.ground_points = 60\n");
  return c;
}

Eigen::Vector3d to_world(const EgoPose& pose, const Eigen::Vector3d& p) {
  return (pose.T * p.homogeneous()).head<3>();
}

}  // namespace

TEST_CASE("config parsing accepts defaults and rejects bad input") {
  const RunConfig d = RunConfig::parse("");
  CHECK(d.channels == RunConfig().channels);
  CHECK(RunConfig::parse(d.to_text()).to_text() == d.to_text());

  const RunConfig c = RunConfig::parse("# comment\nchannels = 4\nmodalities = LT\noperator = wkv\n");
  CHECK(c.channels == 4);
  CHECK(c.scene.channels == 4);
  CHECK(c.modalities == Availability{true, false, true});
  CHECK(c.op == ScanKind::WKV);

  CHECK_THROWS_AS(RunConfig::parse("no_such_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("channels = four\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("channels 4\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("grid.origin = 1,2\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("modalities = C\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("topk = 0\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("train.tasks = det,foo\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("train.lr = -1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("grid.voxel_size = 0,1,1\n"), ConfigError);
}

TEST_CASE("gen is deterministic and writes one file per frame") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const fs::path cfg = scratch("gen_cfg") / "run.cfg";
  write_file_atomic(cfg, small_config().to_text());
  std::ostringstream log, err;
  CommandOptions o;
  o.config = cfg;
  o.seed = 11;
  o.out = a;
  REQUIRE(run_command("gen", o, log, err) == kExitOk);
  o.out = b;
  REQUIRE(run_command("gen", o, log, err) == kExitOk);
  const auto names = listing(a);
  CHECK(names == std::vector<std::string>{"frame_000.json", "frame_001.json", "frame_002.json"});
  CHECK(names == listing(b));
  for (const auto& n : names) CHECK(read_file(a / n) == read_file(b / n));

  o.seed = 12;
  o.out = scratch("gen_c");
  REQUIRE(run_command("gen", o, log, err) == kExitOk);
  CHECK(read_file(o.out / "frame_000.json") != read_file(a / "frame_000.json"));
}

TEST_CASE("gen with zero frames writes nothing") {
  RunConfig c = small_config();
  c.scene.frames = 0;
  const fs::path cfg = scratch("gen0_cfg") / "run.cfg";
  write_file_atomic(cfg, c.to_text());
  CommandOptions o;
  o.config = cfg;
  o.out = scratch("gen0");
  std::ostringstream log, err;
  CHECK(run_command("gen", o, log, err) == kExitOk);
  CHECK(listing(o.out).empty());
}

TEST_CASE("frames round trip through json") {
  const auto frames = generate_scene(small_config().scene, 3);
  for (const auto& f : frames) {
    const SceneFrame g = SceneFrame::from_json(json::parse(f.to_json().dump()));
    CHECK(g.index == f.index);
    CHECK(g.labels == f.labels);
    CHECK(g.points.points == f.points.points);
    CHECK(g.pose.T == f.pose.T);
    CHECK(g.cameras.size() == f.cameras.size());
    CHECK(g.to_json().dump() == f.to_json().dump());
  }
}

TEST_CASE("box points replay rigidly along the box trajectories") {
  const SceneSpec spec = small_config().scene;
  const auto frames = generate_scene(spec, 5);
  REQUIRE(frames.size() == 3);
  const SceneFrame& f0 = frames[0];
  double worst = 0.0;
  for (const auto& f : frames) {
    CHECK(f.pose.T.isApprox(EgoPose::from_xyz_yaw(spec.ego_speed * f.timestamp, 0, 0,
                                                  spec.ego_yaw_rate * f.timestamp).T));
    REQUIRE(f.labels == f0.labels);
    for (Index r = 0; r < f.points.size(); ++r) {
      const int b = f.labels[static_cast<std::size_t>(r)];
      Eigen::Vector3d now = to_world(f.pose, f.points.points.row(r).head<3>().transpose());
      Eigen::Vector3d then = to_world(f0.pose, f0.points.points.row(r).head<3>().transpose());
      if (b >= 0) {
        now -= f.boxes[static_cast<std::size_t>(b)].center_at(f.timestamp);
        then -= f0.boxes[static_cast<std::size_t>(b)].center_at(f0.timestamp);
      }
      worst = std::max(worst, (now - then).cwiseAbs().maxCoeff());
    }
  }
  CHECK(worst <= 1e-12);
  // intensities carry per-frame noise
  CHECK(frames[1].points.points.col(3) != f0.points.points.col(3));
}

TEST_CASE("box centers in the ego frame") {
  const auto frames = generate_scene(small_config().scene, 2);
  for (const auto& f : frames) {
    const auto centers = box_centers_ego(f);
    REQUIRE(centers.size() == f.boxes.size());
    for (std::size_t i = 0; i < centers.size(); ++i)
      CHECK((to_world(f.pose, centers[i]) - f.boxes[i].center_at(f.timestamp)).norm() <= 1e-12);
  }
}

TEST_CASE("LC run matches the hand-built camera plus LiDAR pipeline") {
  const RunConfig cfg = small_config();
  const auto frames = generate_scene(cfg.scene, 8);
  const Model model = Model::init(cfg, 4);
  const auto results = run_stream(frames, model, Availability::parse("LC"), cfg.grid);
  REQUIRE(results.size() == frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto lidar = vfe(voxelize(frames[i].points, cfg.grid), model.params.vfe);
    const auto cam = lift_cameras(frames[i].cameras, cfg.grid, cfg.channels, model.topk);
    const auto fused = concat_modalities(lidar, cam);
    ad::Tape t(false);
    const ad::Var bev = backbone_forward(t, constant(t, fused), model.backbone, model.params);
    CHECK(results[i].fused_voxels == fused.size());
    CHECK(results[i].bev.data == t.value(bev));
    CHECK(results[i].failures.empty());
  }
}

TEST_CASE("regimes share weights and keep invariants") {
  const RunConfig cfg = small_config();
  const auto frames = generate_scene(cfg.scene, 9);
  const Model model = Model::init(cfg, 9);
  for (const char* name : {"L", "LT", "LC", "LCT"}) {
    CAPTURE(name);
    const auto rs = run_stream(frames, model, Availability::parse(name), cfg.grid);
    for (const auto& r : rs) {
      CHECK(r.failures.empty());
      CHECK(r.bev.data.allFinite());
      CHECK(r.fused_voxels >= std::max(r.lidar_voxels, r.camera_voxels));
    }
  }
}

TEST_CASE("empty scene gives a zero BEV") {
  RunConfig cfg = small_config();
  SceneFrame empty;
  const Model model = Model::init(cfg, 1);
  std::vector<SceneFrame> frames{empty};
  const auto rs = run_stream(frames, model, Availability::parse("L"), cfg.grid);
  REQUIRE(rs.size() == 1);
  CHECK(rs[0].fused_voxels == 0);
  CHECK(rs[0].bev.data.size() > 0);
  CHECK(rs[0].bev.data.isZero(0.0));
}

TEST_CASE("forward writes BEV files and a report") {
  const fs::path scenes = scratch("fwd_scenes"), out = scratch("fwd_out");
  const fs::path cfg = scratch("fwd_cfg") / "run.cfg";
  write_file_atomic(cfg, small_config().to_text());
  std::ostringstream log, err;
  CommandOptions o;
  o.config = cfg;
  o.out = scenes;
  REQUIRE(run_command("gen", o, log, err) == kExitOk);
  o.scenes = scenes;
  o.out = out;
  o.modalities = "LCT";
  CHECK(run_command("forward", o, log, err) == kExitOk);
  CHECK(listing(out) ==
        std::vector<std::string>{"bev_000.json", "bev_001.json", "bev_002.json", "report.json"});
  const json report = json::parse(read_file(out / "report.json"));
  CHECK(report.at("modalities") == "LCT");
  CHECK(report.at("invariants_ok") == true);
  CHECK(report.at("frames").size() == 3);
}

TEST_CASE("configuration errors exit with code 2") {
  std::ostringstream log, err;
  CommandOptions o;
  o.out = scratch("errs");

  o.config = o.out / "missing.cfg";
  CHECK(run_command("gen", o, log, err) == kExitConfig);

  const fs::path bad = o.out / "bad.cfg";
  write_file_atomic(bad, "channels = -\n");
  o.config = bad;
  CHECK(run_command("train", o, log, err) == kExitConfig);

  o.config.reset();
  o.modalities = "XYZ";
  CHECK(run_command("forward", o, log, err) == kExitConfig);

  o.modalities.reset();
  o.scenes = o.out / "nowhere";
  CHECK(run_command("forward", o, log, err) == kExitConfig);

  CHECK(run_command("nonsense", CommandOptions{}, log, err) == kExitConfig);
  CHECK(!err.str().empty());
}

TEST_CASE("forward refuses camera input on frames without cameras") {
  RunConfig c = small_config();
  c.scene.cameras = 0;
  const fs::path cfg = scratch("nocam_cfg") / "run.cfg";
  write_file_atomic(cfg, c.to_text());
  std::ostringstream log, err;
  CommandOptions o;
  o.config = cfg;
  o.out = scratch("nocam");
  o.modalities = "LC";
  CHECK(run_command("forward", o, log, err) == kExitConfig);
  o.modalities = "LT";
  CHECK(run_command("forward", o, log, err) == kExitOk);
}

TEST_CASE("train with zero learning rate keeps the loss flat") {
  RunConfig c = small_config();
  c.train_steps = 3;
  c.train_lr = 0.0;
  const auto r = train(c, 2);
  REQUIRE(r.curve.size() == 3);
  for (const auto& s : r.curve) CHECK(s.total == r.curve.front().total);
}

TEST_CASE("train is deterministic and writes its log") {
  RunConfig c = small_config();
  c.train_steps = 4;
  const fs::path cfg = scratch("train_cfg") / "run.cfg";
  write_file_atomic(cfg, c.to_text());
  std::ostringstream log, err;
  CommandOptions o;
  o.config = cfg;
  o.out = scratch("train_a");
  REQUIRE(run_command("train", o, log, err) == kExitOk);
  const fs::path a = o.out;
  o.out = scratch("train_b");
  REQUIRE(run_command("train", o, log, err) == kExitOk);
  CHECK(read_file(a / "train_log.jsonl") == read_file(o.out / "train_log.jsonl"));
  CHECK(read_file(a / "checkpoint.json") == read_file(o.out / "checkpoint.json"));

  std::istringstream lines(read_file(a / "train_log.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const json j = json::parse(line);
    CHECK(j.at("step") == n);
    CHECK(j.contains("total"));
    ++n;
  }
  CHECK(n == 4);

  // the checkpoint restores into a fresh model and drives forward
  o.checkpoint = a / "checkpoint.json";
  o.out = scratch("train_fwd");
  CHECK(run_command("forward", o, log, err) == kExitOk);
}

TEST_CASE("bench csv layout") {
  BenchOptions b;
  b.lengths = {64, 128};
  b.channels = 4;
  b.repeats = 1;
  b.chunk = 16;
  b.min_batch_seconds = 0.0;
  const auto rows = run_bench(b, 0);
  const std::string csv = bench_csv(rows);
  CHECK(csv.substr(0, csv.find('\n')) == std::string(kBenchCsvHeader));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size() + 1));
  for (const auto& s : bench_scaling(rows)) {
    CHECK(s.time_ratios.size() == 1);
    CHECK(s.macs_linear == (s.op != "attention"));
  }
}
