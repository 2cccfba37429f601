#include "unilion/diagnostics.hpp"

#include "unilion/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <map>
#include <sstream>
#include <unordered_set>

namespace unilion {

namespace {

using ad::Tape;
using ad::Var;

// Fixed random weighting of an op output; the same matrix on every rebuild.
Var reduce(Tape& t, Var v, std::uint64_t stream) {
  const auto& m = t.value(v);
  Rng rng(0xfeed ^ stream);
  const double s = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(1, m.size())));
  return ad::weighted_sum(t, v, rng.normal_matrix(m.rows(), m.cols(), s));
}

std::vector<VoxelCoord> random_coords(Rng& rng, Index count, const Eigen::Vector3i& extent) {
  std::unordered_set<VoxelCoord, VoxelCoordHash> seen;
  std::vector<VoxelCoord> out;
  const Index cells = static_cast<Index>(extent.x()) * extent.y() * extent.z();
  count = std::min(count, cells);
  while (static_cast<Index>(out.size()) < count) {
    const VoxelCoord c{0, rng.uniform_int(0, extent.x() - 1), rng.uniform_int(0, extent.y() - 1),
                       rng.uniform_int(0, extent.z() - 1)};
    if (seen.insert(c).second) out.push_back(c);
  }
  std::sort(out.begin(), out.end(), canonical_less);
  return out;
}

struct Suite {
  double eps;
  GradientSuite out;

  static NamedReport run(std::string name, std::span<const ad::ParamSlot> slots,
                         const std::function<Var(Tape&)>& build, const ad::FdOptions& o) {
    return {std::move(name), ad::check_gradients(build, slots, o)};
  }
  void check(std::string name, std::vector<ad::ParamSlot> slots,
             const std::function<Var(Tape&)>& build) {
    ad::FdOptions o;
    o.eps = eps;
    out.ops.push_back(run(std::move(name), slots, build, o));
  }
  // Random directions, as for the end-to-end check.
  void composite(std::string name, std::vector<ad::ParamSlot> slots,
                 const std::function<Var(Tape&)>& build) {
    ad::FdOptions o;
    o.eps = eps;
    o.directions = 64;
    o.seed = 0x5eed + out.composites.size();
    out.composites.push_back(run(std::move(name), slots, build, o));
  }
};

}  // namespace

GradientSuite op_gradient_suite(std::uint64_t seed, double eps) {
  Rng rng(seed);
  Suite s{eps, {}};

  {
    Eigen::MatrixXd a = rng.normal_matrix(4, 3), b = rng.normal_matrix(4, 3);
    s.check("add", {ad::slot("a", a), ad::slot("b", b)},
            [&](Tape& t) { return reduce(t, ad::add(t, t.param(a), t.param(b)), 1); });
    s.check("scale", {ad::slot("a", a)},
            [&](Tape& t) { return reduce(t, ad::scale(t, t.param(a), -1.7), 2); });
  }
  {
    Eigen::MatrixXd x = rng.normal_matrix(5, 4), W = rng.normal_matrix(3, 4, 0.5);
    Eigen::VectorXd b = rng.normal_vector(3);
    s.check("affine", {ad::slot("x", x), ad::slot("W", W), ad::slot("b", b)},
            [&](Tape& t) { return reduce(t, ad::affine(t, t.param(x), t.param(W), t.param(b)), 3); });
  }
  {
    Eigen::MatrixXd x = rng.uniform_matrix(6, 3, -3.0, 3.0);
    // stay clear of the stationary point near -0.7518 where gelu' = 0
    for (Index i = 0; i < x.size(); ++i)
      if (std::abs(x.data()[i] + 0.7518) < 0.3) x.data()[i] -= 0.6;
    s.check("gelu", {ad::slot("x", x)}, [&](Tape& t) { return reduce(t, ad::gelu(t, t.param(x)), 4); });
  }
  {
    Eigen::MatrixXd x = rng.normal_matrix(5, 4);
    Eigen::VectorXd g = Eigen::VectorXd::Ones(4) + rng.normal_vector(4, 0.3), b = rng.normal_vector(4, 0.3);
    s.check("layer_norm", {ad::slot("x", x), ad::slot("gamma", g), ad::slot("beta", b)}, [&](Tape& t) {
      return reduce(t, ad::layer_norm(t, t.param(x), t.param(g), t.param(b)), 5);
    });
  }
  {
    Eigen::MatrixXd x = rng.normal_matrix(5, 3);
    s.check("gather_rows", {ad::slot("x", x)}, [&](Tape& t) {
      return reduce(t, ad::gather_rows(t, t.param(x), {2, -1, 0, 2, 4, 1, 3}), 6);
    });
    s.check("scatter_sum", {ad::slot("x", x)}, [&](Tape& t) {
      return reduce(t, ad::scatter_sum(t, t.param(x), {0, 2, -1, 2, 1}, 3), 7);
    });
  }
  {
    const Eigen::Vector3i extent(6, 6, 4);
    const auto coords = random_coords(rng, 20, extent);
    VoxelGrid grid;
    grid.extent = extent;
    const IndexMap map = build_index_map(coords, Eigen::Vector3i(2, 2, 2), grid);
    Eigen::MatrixXd x = rng.normal_matrix(static_cast<Index>(coords.size()), 3);
    s.check("segment_sum", {ad::slot("x", x)},
            [&](Tape& t) { return reduce(t, ad::segment_sum(t, t.param(x), map), 8); });
    s.check("segment_mean", {ad::slot("x", x)},
            [&](Tape& t) { return reduce(t, ad::segment_mean(t, t.param(x), map), 9); });
    s.check("merge_expand", {ad::slot("x", x)}, [&](Tape& t) {
      const Var coarse = ad::segment_mean(t, t.param(x), map);
      return reduce(t, ad::gather_rows(t, coarse, map.parent_of), 10);
    });

    const NeighborTable table = build_neighbor_table(coords);
    Eigen::MatrixXd W = rng.normal_matrix(kKernelVolume * 3, 2, 0.3);
    Eigen::VectorXd b = rng.normal_vector(2);
    s.check("submanifold_conv3", {ad::slot("x", x), ad::slot("weights", W), ad::slot("bias", b)},
            [&](Tape& t) {
              return reduce(t, ad::submanifold_conv3(t, t.param(x), table, t.param(W), t.param(b)), 11);
            });

    for (ScanKind kind : {ScanKind::Selective, ScanKind::WKV}) {
      LayerConfig lc{{3, 3, 2}, 7, kind, 3};
      Rng prng = rng.fork(kind == ScanKind::Selective ? 1 : 2);
      LayerParams lp = init_layer(lc, prng);
      const GroupLayout layout = partition(coords, extent, lc.window, AxisOrder::XMajor, lc.group_size);
      std::vector<ad::ParamSlot> slots = param_slots(lp, "layer");
      std::vector<ad::ParamSlot> scan_slots;
      for (auto& sl : slots)
        if (sl.name.find(".scan_x.") != std::string::npos) scan_slots.push_back(sl);
      Eigen::MatrixXd xs = x;
      scan_slots.push_back(ad::slot("x", xs));
      const std::string tag = kind == ScanKind::Selective ? "selective" : "wkv";
      s.check("group_scan_" + tag, scan_slots, [&](Tape& t) {
        return reduce(t, ad::group_scan(t, t.param(xs), layout, lp.scan_x), 12);
      });
      slots.push_back(ad::slot("x", xs));
      s.composite("unilion_layer_" + tag, slots, [&](Tape& t) {
        const SparseVar in{coords, t.param(xs), grid};
        return reduce(t, unilion_layer(t, in, lc, lp).features, 13);
      });
    }

    DescriptorParams dp = init_descriptor(3, rng);
    dp.weights += rng.normal_matrix(dp.weights.rows(), dp.weights.cols(), 0.2);
    std::vector<ad::ParamSlot> dslots = param_slots(dp, "descriptor");
    dslots.push_back(ad::slot("x", x));
    s.composite("descriptor", dslots, [&](Tape& t) {
      const SparseVar in{coords, t.param(x), grid};
      return reduce(t, descriptor(t, in, dp).features, 14);
    });
  }
  {
    const Eigen::Vector3i extent(8, 8, 4);
    const auto coords = random_coords(rng, 30, extent);
    VoxelGrid grid;
    grid.extent = extent;
    const Index C = 4;
    const BackboneConfig bc = BackboneConfig::uniform(1, C, 4, 4, {16}, ScanKind::Selective);
    Rng prng = rng.fork(3);
    BlockParams bp{};
    for (int l = 0; l < 4; ++l) bp.layers[static_cast<std::size_t>(l)] = init_layer(bc.blocks[0].layers[static_cast<std::size_t>(l)], prng);
    for (auto& d : bp.descriptors) d = init_descriptor(C, prng);
    Eigen::MatrixXd x = rng.normal_matrix(static_cast<Index>(coords.size()), C);
    std::vector<ad::ParamSlot> slots = param_slots(bp, "block");
    slots.push_back(ad::slot("x", x));
    s.composite("unilion_block", slots, [&](Tape& t) {
      const SparseVar in{coords, t.param(x), grid};
      return reduce(t, unilion_block(t, in, bc.blocks[0], bp).features, 15);
    });

    VfeParams vp = init_vfe(4, C, prng);
    Eigen::MatrixXd raw = rng.normal_matrix(static_cast<Index>(coords.size()), 4);
    std::vector<ad::ParamSlot> vslots = param_slots(vp);
    vslots.push_back(ad::slot("raw", raw));
    s.composite("vfe", vslots, [&](Tape& t) {
      const SparseVar in{coords, t.param(raw), grid};
      return reduce(t, vfe(t, in, vp).features, 16);
    });

    const std::vector<VoxelCoord> pm(coords.begin(), coords.begin() + 6);
    const auto offsets = default_generation_offsets();
    s.composite("voxel_generate_flatten_bev", {ad::slot("x", x)}, [&](Tape& t) {
      const SparseVar in{coords, t.param(x), grid};
      const SparseVar gen = voxel_generate(t, in, pm, offsets);
      return reduce(t, flatten_bev(t, gen, 1), 17);
    });
  }
  {
    Eigen::MatrixXd a = rng.normal_matrix(4, 3), b = rng.normal_matrix(2, 3);
    s.check("concat_rows", {ad::slot("a", a), ad::slot("b", b)}, [&](Tape& t) {
      const std::vector<Var> parts{t.param(a), t.param(b)};
      return reduce(t, ad::concat_rows(t, parts), 18);
    });
    s.check("mean_rows", {ad::slot("a", a)}, [&](Tape& t) { return reduce(t, ad::mean_rows(t, t.param(a)), 19); });
    s.check("sum", {ad::slot("a", a)}, [&](Tape& t) { return ad::sum(t, t.param(a)); });
    s.check("weighted_sum", {ad::slot("a", a)}, [&](Tape& t) { return reduce(t, t.param(a), 20); });
    s.check("linear_combination", {ad::slot("a", a), ad::slot("b", b)}, [&](Tape& t) {
      const std::vector<Var> terms{reduce(t, t.param(a), 21), reduce(t, t.param(b), 22)};
      const std::vector<double> coefs{0.7, -1.3};
      return ad::linear_combination(t, terms, coefs);
    });
  }
  {
    Eigen::MatrixXd logits = rng.uniform_matrix(12, 1, -1.5, 1.5);
    Eigen::MatrixXd heat = rng.uniform_matrix(12, 1, 0.0, 0.7);
    heat(3, 0) = 1.0;
    heat(8, 0) = 1.0;
    s.check("focal_loss", {ad::slot("logits", logits)},
            [&](Tape& t) { return ad::focal_loss(t, t.param(logits), heat); });
    Eigen::MatrixXd occ(12, 1);
    for (Index i = 0; i < 12; ++i) occ(i, 0) = static_cast<double>(i % 3 == 0);
    s.check("bce_with_logits", {ad::slot("logits", logits)},
            [&](Tape& t) { return ad::bce_with_logits(t, t.param(logits), occ); });
  }
  {
    Eigen::MatrixXd logits = rng.normal_matrix(7, 3);
    const std::vector<int> labels{0, 2, 1, 1, 0, 2, 2};
    s.check("softmax_cross_entropy", {ad::slot("logits", logits)},
            [&](Tape& t) { return ad::softmax_cross_entropy(t, t.param(logits), labels); });
    Eigen::MatrixXd pred = rng.normal_matrix(7, 2, 1.5);
    const Eigen::MatrixXd target = rng.normal_matrix(7, 2);
    s.check("smooth_l1", {ad::slot("pred", pred)}, [&](Tape& t) {
      return ad::smooth_l1(t, t.param(pred), target, {1, 0, 1, 1, 0, 1, 1});
    });
  }
  return s.out;
}

ad::GradientReport end_to_end_gradcheck(const RunConfig& base, std::uint64_t seed) {
  RunConfig cfg = base;
  cfg.blocks = 1;
  cfg.scene.frames = 1;
  cfg.validate();
  const std::vector<SceneFrame> frames = generate_scene(cfg.scene, seed);
  Model model = Model::init(cfg, seed);
  Availability regime = cfg.modalities;
  regime.temporal = false;

  ad::Tape enc(false);
  const SparseFeatureSetd input = value(enc, encode_frame(enc, frames[0], model, regime, cfg.grid, nullptr));
  const VoxelGrid bev_grid = final_grid(cfg.grid, model.backbone);
  const TaskTargets targets = make_targets(frames[0], cfg.scene, bev_grid, {"det", "occ"}, cfg.map_classes);

  std::vector<ad::ParamSlot> slots = model.slots();
  const auto build = [&](ad::Tape& t) {
    const ad::Var bev = backbone_forward(t, constant(t, input), model.backbone, model.params);
    const TaskVars heads = toy_heads(t, bev, model.heads, targets);
    const std::vector<ad::Var> terms{reduce(t, bev, 99), *heads.det, *heads.occ};
    const std::vector<double> coefs{1.0, 1.0, 1.0};
    return ad::linear_combination(t, terms, coefs);
  };
  ad::FdOptions o;
  o.eps = cfg.gradcheck_eps;
  o.directions = cfg.gradcheck_directions;
  o.seed = seed ^ 0x5eed;
  return ad::check_gradients(build, slots, o);
}

namespace {

double worst(const std::vector<NamedReport>& reports) {
  double m = 0.0;
  for (const auto& r : reports) m = std::max(m, r.report.max_rel_error());
  return m;
}

nlohmann::json reports_json(const std::vector<NamedReport>& reports, double tolerance) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json j = r.report.to_json();
    j["op"] = r.op;
    j["passed"] = r.report.max_rel_error() <= tolerance;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace

double GradcheckSummary::op_max_error() const { return worst(suite.ops); }
double GradcheckSummary::composite_max_error() const { return worst(suite.composites); }

bool GradcheckSummary::passed() const {
  return op_max_error() <= kOpGradTolerance && composite_max_error() <= kEndToEndGradTolerance &&
         end_to_end.max_rel_error() <= kEndToEndGradTolerance;
}

nlohmann::json GradcheckSummary::to_json() const {
  nlohmann::json e2e = end_to_end.to_json();
  e2e["passed"] = end_to_end.max_rel_error() <= kEndToEndGradTolerance;
  return {{"ops", reports_json(suite.ops, kOpGradTolerance)},
          {"op_tolerance", kOpGradTolerance},
          {"op_max_rel_error", op_max_error()},
          {"composites", reports_json(suite.composites, kEndToEndGradTolerance)},
          {"composite_max_rel_error", composite_max_error()},
          {"end_to_end", std::move(e2e)},
          {"end_to_end_tolerance", kEndToEndGradTolerance},
          {"passed", passed()}};
}

GradcheckSummary run_gradcheck(const RunConfig& cfg, std::uint64_t seed) {
  return {op_gradient_suite(seed, cfg.gradcheck_eps), end_to_end_gradcheck(cfg, seed)};
}

// --- benchmark ----------------------------------------------------------------

namespace {

struct BenchCase {
  BenchRow row;
  std::function<void()> run;
  int inner = 1;
};

double time_batch(const BenchCase& c) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  for (int i = 0; i < c.inner; ++i) c.run();
  return std::chrono::duration<double>(clock::now() - start).count() / c.inner;
}

template <typename Scalar>
void bench_cases(const BenchOptions& o, Index T, Rng& rng, std::vector<BenchCase>& cases) {
  const Index C = o.channels;
  const std::string precision = std::is_same_v<Scalar, float> ? "float" : "double";
  auto x = std::make_shared<const MatrixX<Scalar>>(rng.normal_matrix(T, C).cast<Scalar>());
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  SelectiveScanParams<double> sp{rng.normal_matrix(C, C, s), rng.normal_matrix(C, C, s),
                                 rng.normal_matrix(C, C, s), rng.normal_vector(C),
                                 rng.normal_vector(C), rng.normal_vector(C)};
  WKVScanParams<double> wp{rng.normal_matrix(C, C, s), rng.normal_matrix(C, C, s),
                           rng.normal_matrix(C, C, s), rng.uniform_matrix(C, 1, 0.05, 1.0),
                           rng.normal_vector(C)};
  auto sel = std::make_shared<const SelectiveScanParams<Scalar>>(sp.cast<Scalar>());
  auto wkv = std::make_shared<const WKVScanParams<Scalar>>(wp.cast<Scalar>());
  const Index chunk = o.chunk;

  const auto add = [&](const char* op, auto fn) {
    OpCounter counter;
    fn(&counter);
    BenchCase c;
    c.row = {op, T, C, precision, 0.0, counter.macs,
             static_cast<double>(counter.macs) / static_cast<double>(T)};
    c.run = [fn] { fn(nullptr); };
    cases.push_back(std::move(c));
  };
  add("selective_seq", [x, sel](OpCounter* c) { selective_scan_seq<Scalar>(*x, *sel, {}, c); });
  add("selective_chunked", [x, sel, chunk](OpCounter* c) {
    selective_scan_chunked<Scalar>(*x, *sel, {}, chunk, c);
  });
  add("wkv", [x, wkv](OpCounter* c) { wkv_scan<Scalar>(*x, *wkv, {}, c); });
  add("attention", [x](OpCounter* c) { quadratic_attention<Scalar>(*x, c); });
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchOptions& o, std::uint64_t seed) {
  if (o.channels < 1 || o.chunk < 1) throw ConfigError("bench: channels and chunk must be >= 1");
  Rng rng(seed);
  std::vector<BenchCase> cases;
  for (Index T : o.lengths) {
    if (T < 1) throw ConfigError("bench: lengths must be >= 1");
    Rng r = rng.fork(static_cast<std::uint64_t>(T));
    if (o.precision == Precision::Float)
      bench_cases<float>(o, T, r, cases);
    else
      bench_cases<double>(o, T, r, cases);
  }
  for (auto& c : cases) {
    const double once = time_batch(c);
    c.inner = std::max(1, static_cast<int>(std::ceil(o.min_batch_seconds / std::max(once, 1e-9))));
  }
  // round robin with the lengths of one operator back to back, so a slow
  // stretch of the machine hits neighbouring lengths alike
  std::stable_sort(cases.begin(), cases.end(), [](const BenchCase& a, const BenchCase& b) {
    return a.row.op < b.row.op;
  });
  std::vector<std::vector<double>> samples(cases.size());
  for (int r = 0; r < std::max(1, o.repeats); ++r)
    for (std::size_t i = 0; i < cases.size(); ++i) samples[i].push_back(time_batch(cases[i]));
  for (std::size_t i = 0; i < cases.size(); ++i) {
    auto& v = samples[i];
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    cases[i].row.seconds = n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }

  std::vector<BenchRow> rows;
  for (auto& c : cases) rows.push_back(std::move(c.row));
  std::stable_sort(rows.begin(), rows.end(), [](const BenchRow& a, const BenchRow& b) {
    return a.op != b.op ? a.op < b.op : a.T < b.T;
  });
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << kBenchCsvHeader << '\n';
  out.precision(9);
  for (const auto& r : rows)
    out << r.op << ',' << r.T << ',' << r.C << ',' << r.precision << ',' << r.seconds << ','
        << r.macs << ',' << r.macs_per_token << '\n';
  return out.str();
}

std::vector<Scaling> bench_scaling(const std::vector<BenchRow>& rows) {
  std::vector<Scaling> out;
  std::map<std::string, std::size_t> index;
  std::map<std::string, const BenchRow*> last;
  for (const auto& r : rows) {
    auto [it, fresh] = index.try_emplace(r.op, out.size());
    if (fresh) out.push_back({r.op, {}, true});
    Scaling& s = out[it->second];
    if (const BenchRow* prev = last[r.op]) {
      s.time_ratios.push_back(r.seconds / prev->seconds);
      // macs(T) * T_prev == macs(T_prev) * T, in integers
      if (r.macs * static_cast<std::uint64_t>(prev->T) != prev->macs * static_cast<std::uint64_t>(r.T))
        s.macs_linear = false;
    }
    last[r.op] = &r;
  }
  return out;
}

}  // namespace unilion
