// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include "support.hpp"
#include "unilion/backbone.hpp"
#include "unilion/diagnostics.hpp"
#include "unilion/pipeline.hpp"
#include "unilion/tasks.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>

using namespace unilion;
using testsupport::normwise_error;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1
Outcome scan_equivalence() {
  Rng rng(101);
  double worst_d = 0.0, worst_f = 0.0;
  for (int rep = 0; rep < 500; ++rep) {
    const Index T = rng.uniform_int(1, 4096);
    const Index C = rng.uniform_int(1, 32);
    const auto p = testsupport::random_selective(rng, C);
    const Eigen::MatrixXd x = rng.normal_matrix(T, C);
    const Mask m = rep % 2 ? testsupport::random_mask(rng, T, rng.uniform(0.3, 1.0)) : Mask{};
    const Eigen::MatrixXd seq = selective_scan_seq(x, p, m);
    const Eigen::MatrixXf xf = x.cast<float>();
    const SelectiveScanParams<float> pf{p.Wg.cast<float>(), p.Wu.cast<float>(), p.Wo.cast<float>(),
                                        p.bg.cast<float>(), p.bu.cast<float>(), p.bo.cast<float>()};
    const Eigen::MatrixXf seqf = selective_scan_seq(xf, pf, m);
    for (Index chunk : {Index(1), Index(7), Index(64), T}) {
      worst_d = std::max(worst_d, normwise_error(selective_scan_chunked(x, p, m, chunk), seq));
      worst_f = std::max(worst_f, normwise_error(selective_scan_chunked(xf, pf, m, chunk), seqf));
    }
  }
  return {worst_d <= 1e-12 && worst_f <= 1e-5,
          "500 cases, max rel err double " + fmt("%.3g", worst_d) + " float " + fmt("%.3g", worst_f)};
}

// 2
Outcome wkv_oracle() {
  Rng rng(202);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const Index T = rng.uniform_int(1, 256);
    const Index C = rng.uniform_int(1, 16);
    const auto p = testsupport::random_wkv(rng, C);
    const Eigen::MatrixXd x = rng.normal_matrix(T, C);
    const Mask m = rep % 3 == 0 ? testsupport::random_mask(rng, T, 0.7) : Mask{};
    worst = std::max(worst, normwise_error(wkv_scan(x, p, m), testsupport::wkv_quadratic(x, p, m)));
  }
  return {worst <= 1e-9, "200 cases, max rel err " + fmt("%.3g", worst)};
}

// 3
Outcome gradient_suite() {
  const GradcheckSummary s = run_gradcheck(RunConfig(), 0);
  return {s.passed(), "ops max " + fmt("%.3g", s.op_max_error()) + " (<= 1e-6), composites max " +
                          fmt("%.3g", s.composite_max_error()) + ", end-to-end " +
                          fmt("%.3g", s.end_to_end.max_rel_error()) + " over " +
                          std::to_string(s.end_to_end.directions) + " directions (<= 1e-4)"};
}

// 4
Outcome partition_coverage() {
  Rng rng(404);
  long failures = 0, checks = 0;
  for (int scene = 0; scene < 1000; ++scene) {
    const Eigen::Vector3i extent(rng.uniform_int(8, 64), rng.uniform_int(8, 64), rng.uniform_int(1, 32));
    const int batches = rng.uniform_int(1, 2);
    const auto coords = testsupport::random_coords(rng, extent, rng.uniform_int(1, 5000), batches);
    const int sz = rng.uniform_int(1, 8);
    for (int w : {7, 13, 25}) {
      const WindowShape ws{w, w, sz};
      for (AxisOrder order : {AxisOrder::XMajor, AxisOrder::YMajor}) {
        const auto oracle = testsupport::partition_oracle(coords, ws, order);
        for (Index G : {512, 1024, 2048, 4096}) {
          ++checks;
          const GroupLayout lay = partition(coords, extent, ws, order, G);
          const Index L = static_cast<Index>(coords.size());
          std::vector<int> seen(coords.size(), 0);
          bool ok = lay.perm == oracle && lay.group_count == (L + G - 1) / G &&
                    lay.pad_len == lay.group_count * G - L;
          for (Index g = 0; g < lay.group_count; ++g)
            for (Index i : lay.group(g)) ++seen[static_cast<std::size_t>(i)];
          ok = ok && std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
          failures += ok ? 0 : 1;
        }
      }
    }
  }
  return {failures == 0, std::to_string(checks) + " partitions, " + std::to_string(failures) + " failures"};
}

// 5
Outcome merge_expand() {
  Rng rng(505);
  double worst_mean = 0.0, worst_mass = 0.0;
  long set_failures = 0;
  for (int scene = 0; scene < 1000; ++scene) {
    const VoxelGrid grid = testsupport::make_grid(rng.uniform_int(2, 40), rng.uniform_int(2, 40),
                                                  rng.uniform_int(1, 16));
    const Index C = rng.uniform_int(1, 8);
    const auto s = testsupport::random_set(rng, grid, rng.uniform_int(1, 800), C, rng.uniform_int(1, 2));
    const Eigen::Vector3i stride(rng.uniform_int(1, 3), rng.uniform_int(1, 3), rng.uniform_int(1, 3));
    const auto [coarse, map] = voxel_merge(s, stride);
    const auto back = voxel_expand(coarse, map);
    if (back.coords != s.coords) ++set_failures;
    worst_mean = std::max(worst_mean, normwise_error(back.features, testsupport::sibling_mean(s, stride)));
    Eigen::RowVectorXd mass = Eigen::RowVectorXd::Zero(C);
    for (Index p = 0; p < coarse.size(); ++p)
      mass += coarse.features.row(p) * static_cast<double>(map.child_count(p));
    worst_mass = std::max(worst_mass, (mass - s.features.colwise().sum()).cwiseAbs().maxCoeff());
  }
  return {set_failures == 0 && worst_mean <= 1e-12 && worst_mass <= 1e-10,
          "1000 scenes, set mismatches " + std::to_string(set_failures) + ", sibling-mean err " +
              fmt("%.3g", worst_mean) + ", mass err " + fmt("%.3g", worst_mass)};
}

// 6
Outcome conv_oracle() {
  Rng rng(606);
  double worst = 0.0;
  for (int scene = 0; scene < 200; ++scene) {
    const VoxelGrid grid = testsupport::make_grid(rng.uniform_int(2, 16), rng.uniform_int(2, 16),
                                                  rng.uniform_int(1, 8));
    const Index cin = rng.uniform_int(1, 6), cout = rng.uniform_int(1, 6);
    const auto s = testsupport::random_set(rng, grid, rng.uniform_int(1, 500), cin, rng.uniform_int(1, 2));
    const ConvKernel3<double> k{rng.normal_matrix(27 * cin, cout), rng.normal_vector(cout)};
    worst = std::max(worst, normwise_error(submanifold_conv3(s, k).features, testsupport::dense_conv_oracle(s, k)));
  }
  return {worst <= 1e-12, "200 scenes, max rel err " + fmt("%.3g", worst)};
}

// 7
Outcome complexity_bench() {
  const auto rows = run_bench(BenchOptions{}, 0);
  bool ok = true;
  std::ostringstream os;
  for (const auto& s : bench_scaling(rows)) {
    const bool quadratic = s.op == "attention";
    os << s.op << " [";
    for (std::size_t i = 0; i < s.time_ratios.size(); ++i) {
      const double r = s.time_ratios[i];
      os << (i ? " " : "") << fmt("%.2f", r);
      ok = ok && (quadratic ? r >= 3.5 : r <= 2.5);
    }
    os << "]" << (quadratic ? "" : (s.macs_linear ? " macs linear" : " macs NOT linear")) << "; ";
    if (!quadratic) ok = ok && s.macs_linear;
  }
  return {ok, os.str()};
}

// 8
Outcome regimes() {
  RunConfig cfg;
  cfg.scene.frames = 4;
  const auto frames = generate_scene(cfg.scene, 808);
  const Model model = Model::init(cfg, 808);
  long failures = 0;
  for (const char* name : {"L", "LT", "LC", "LCT"})
    for (const auto& r : run_stream(frames, model, Availability::parse(name), cfg.grid))
      failures += static_cast<long>(r.failures.size());

  // natively L-configured run with the same weights
  RunConfig native = cfg;
  native.modalities = Availability::parse("L");
  const Model lonly = Model::init(native, 808);
  const bool same_weights = lonly.checkpoint() == model.checkpoint();
  const auto l_run = run_stream(frames, model, Availability::parse("L"), cfg.grid);
  bool bitwise = l_run.size() == frames.size();
  for (std::size_t i = 0; bitwise && i < frames.size(); ++i) {
    const auto tokens = vfe(voxelize(frames[i].points, native.grid), lonly.params.vfe);
    const DenseBEV bev = backbone_forward(tokens, lonly.backbone, lonly.params);
    bitwise = bev.data.rows() == l_run[i].bev.data.rows() && bev.data == l_run[i].bev.data;
  }
  return {failures == 0 && same_weights && bitwise,
          "invariant failures " + std::to_string(failures) + ", L run bitwise " +
              (bitwise ? "equal" : "DIFFERENT") + (same_weights ? "" : ", weights differ")};
}

// 9
Outcome loss_identity() {
  Rng rng(909);
  long mismatches = 0;
  double worst_ulps = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double l_det = std::pow(10.0, rng.uniform(-4.0, 2.0));
    const double l_task = std::pow(10.0, rng.uniform(-4.0, 2.0));
    const double back = dynamic_weight(l_det, l_task) * (l_task + 1e-5);
    if (back != l_det) {
      ++mismatches;
      const double ulp = std::nextafter(l_det, INFINITY) - l_det;
      worst_ulps = std::max(worst_ulps, std::abs(back - l_det) / ulp);
    }
  }

  const TaskLosses l{1.2, 0.8, 2.5, 0.3, 0.7};
  const double hand = 1.0 * 1.2 + 0.5 * (1.2 / (0.8 + 1e-5)) * 0.8 + 1.0 * (1.2 / (2.5 + 1e-5)) * 2.5 +
                      1.0 * 0.3 + 1.0 * 0.7;
  const double got = total_loss(l, LossWeights{1.0, 0.5, 1.0, 1.0, 1.0});
  const bool total_ok = std::abs(got - hand) <= 1e-14 * std::abs(hand);
  return {mismatches == 0 && total_ok,
          "identity exact on " + std::to_string(10000 - mismatches) + "/10000 pairs (worst miss " +
              fmt("%.0f", worst_ulps) + " ulp), total " + fmt("%.17g", got) + " vs hand " +
              fmt("%.17g", hand)};
}

// 10
Outcome toy_training() {
  const RunConfig cfg;
  const TrainResult a = train(cfg, cfg.seed);
  const TrainResult b = train(cfg, cfg.seed);
  if (a.curve.empty()) return {false, "empty curve"};
  const double first = a.curve.front().total, last = a.curve.back().total;
  bool same = a.curve.size() == b.curve.size();
  for (std::size_t i = 0; same && i < a.curve.size(); ++i) same = a.curve[i].total == b.curve[i].total;
  same = same && a.checkpoint == b.checkpoint;
  return {last <= 0.5 * first && same,
          std::to_string(a.curve.size()) + " steps, initial " + fmt("%.5g", first) + " final " +
              fmt("%.5g", last) + " (ratio " + fmt("%.3f", last / first) + "), rerun " +
              (same ? "identical" : "DIFFERENT")};
}

// 11
Outcome generation_geometry() {
  Rng rng(1111);
  long failures = 0;
  Index generated = 0;
  for (int scene = 0; scene < 1000; ++scene) {
    const VoxelGrid grid = testsupport::make_grid(rng.uniform_int(2, 32), rng.uniform_int(2, 32),
                                                  rng.uniform_int(1, 8));
    const auto s = testsupport::random_set(rng, grid, rng.uniform_int(1, 400), 3, rng.uniform_int(1, 2));
    const ScorerParams scorer{rng.normal_matrix(1, 3), Eigen::VectorXd::Zero(1)};
    const auto pm = select_foreground(s, scorer, rng.uniform(0.05, 1.0));
    const auto plan = plan_generation(s.coords, s.grid, pm, default_generation_offsets());
    std::set<std::tuple<int, int, int, int>> got;
    for (const auto& c : plan.generated) got.insert(testsupport::key(c));
    bool ok = got.size() == plan.generated.size() &&
              got == testsupport::generation_oracle(s.coords, s.grid.extent, pm);

    const auto out = voxel_generate(s, pm);
    std::map<std::tuple<int, int, int, int>, Index> orig;
    for (Index i = 0; i < s.size(); ++i) orig[testsupport::key(s.coords[static_cast<std::size_t>(i)])] = i;
    ok = ok && out.size() == s.size() + static_cast<Index>(got.size()) && is_canonical(out.coords);
    for (Index i = 0; ok && i < out.size(); ++i) {
      const auto k = testsupport::key(out.coords[static_cast<std::size_t>(i)]);
      const auto it = orig.find(k);
      ok = it != orig.end() ? out.features.row(i) == s.features.row(it->second)
                            : got.count(k) && out.features.row(i).isZero(0.0);
    }
    generated += static_cast<Index>(got.size());
    failures += ok ? 0 : 1;
  }
  return {failures == 0, "1000 scenes, " + std::to_string(generated) + " generated voxels, " +
                             std::to_string(failures) + " failures"};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"scan equivalence", scan_equivalence},
      {"wkv oracle", wkv_oracle},
      {"gradient suite", gradient_suite},
      {"partition coverage", partition_coverage},
      {"merge/expand roundtrip", merge_expand},
      {"submanifold conv vs dense", conv_oracle},
      {"linear complexity benchmark", complexity_bench},
      {"one model for all regimes", regimes},
      {"dynamic loss identity", loss_identity},
      {"toy training", toy_training},
      {"voxel generation geometry", generation_geometry},
  };
  int failed = 0;
  int n = 0;
  for (const auto& [name, run] : criteria) {
    ++n;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d/%d criteria passed\n", n - failed, n);
  return failed ? 1 : 0;
}
