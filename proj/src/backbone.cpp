#include "unilion/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace unilion {

// --- config -----------------------------------------------------------------

BackboneConfig BackboneConfig::uniform(Index blocks, Index channels, int window_xy, int window_z0,
                                       std::vector<Index> group_sizes, ScanKind op) {
  if (group_sizes.empty()) throw ConfigError("backbone: group size list is empty");
  BackboneConfig cfg;
  cfg.channels = channels;
  int wz = window_z0;
  for (Index i = 0; i < blocks; ++i) {
    BlockConfig block;
    const Index G = group_sizes[static_cast<std::size_t>(i) % group_sizes.size()];
    for (auto& layer : block.layers) layer = {WindowShape{window_xy, window_xy, wz}, G, op, channels};
    cfg.blocks.push_back(block);
    wz = std::max(1, wz / 2);
  }
  return cfg;
}

void BackboneConfig::validate() const {
  if (blocks.empty()) throw ConfigError("backbone: need at least one block");
  if (channels < 1) throw ConfigError("backbone: channels must be >= 1");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("backbone: ratio must lie in (0, 1]");
  if ((height_stride.array() < 1).any()) throw ConfigError("backbone: height stride must be >= 1");
  for (const auto& b : blocks) {
    if ((b.merge_half.array() < 1).any() || (b.merge_quarter.array() < 1).any())
      throw ConfigError("backbone: merge strides must be >= 1");
    for (const auto& l : b.layers) {
      if (l.group_size < 1) throw ConfigError("backbone: group size must be >= 1");
      if (!l.window.valid()) throw ConfigError("backbone: window components must be >= 1");
      if (l.channels != channels) throw ConfigError("backbone: layer channels differ from backbone");
    }
  }
}

// --- init -------------------------------------------------------------------

NormParams init_norm(Index channels) {
  return {Eigen::VectorXd::Ones(channels), Eigen::VectorXd::Zero(channels)};
}

VfeParams init_vfe(Index raw_channels, Index channels, Rng& rng) {
  VfeParams p;
  p.W1 = rng.normal_matrix(channels, raw_channels, 1.0 / std::sqrt(static_cast<double>(raw_channels)));
  p.b1 = rng.normal_vector(channels, 0.1);
  p.W2 = rng.normal_matrix(channels, channels, 1.0 / std::sqrt(static_cast<double>(channels)));
  p.b2 = rng.normal_vector(channels, 0.1);
  return p;
}

namespace {

ScanOperator<double> init_scan(ScanKind kind, Index C, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  ScanOperator<double> op;
  op.kind = kind;
  op.selective = SelectiveScanParams<double>::zeros(C);
  op.wkv = WKVScanParams<double>::zeros(C);
  if (kind == ScanKind::Selective) {
    auto& p = op.selective;
    p.Wg = rng.normal_matrix(C, C, s);
    p.Wu = rng.normal_matrix(C, C, s);
    p.Wo = rng.normal_matrix(C, C, s);
    p.bg = rng.normal_vector(C, 0.5);
    p.bu = rng.normal_vector(C, 0.2);
    p.bo = rng.normal_vector(C, 0.2).array() + 1.0;
  } else {
    auto& p = op.wkv;
    p.Wr = rng.normal_matrix(C, C, s);
    p.Wk = rng.normal_matrix(C, C, s);
    p.Wv = rng.normal_matrix(C, C, s);
    p.w = rng.uniform_matrix(C, 1, 0.05, 1.0);
    p.u = rng.normal_vector(C, 0.5);
  }
  return op;
}

}  // namespace

LayerParams init_layer(const LayerConfig& cfg, Rng& rng) {
  LayerParams p;
  p.norm_x = init_norm(cfg.channels);
  p.norm_y = init_norm(cfg.channels);
  p.scan_x = init_scan(cfg.op, cfg.channels, rng);
  p.scan_y = init_scan(cfg.op, cfg.channels, rng);
  return p;
}

DescriptorParams init_descriptor(Index channels, Rng& rng) {
  ConvKernel3<double> k = ConvKernel3<double>::identity(channels);
  k.weights += rng.normal_matrix(k.weights.rows(), k.weights.cols(),
                                 0.1 / std::sqrt(static_cast<double>(channels)));
  return {std::move(k.weights), rng.normal_vector(channels, 0.05), init_norm(channels)};
}

BackboneParams init_backbone(const BackboneConfig& cfg, Index raw_channels, Rng& rng) {
  cfg.validate();
  BackboneParams p;
  p.vfe = init_vfe(raw_channels, cfg.channels, rng);
  for (const auto& block : cfg.blocks) {
    ScorerParams s{rng.normal_matrix(1, cfg.channels, 1.0), Eigen::VectorXd::Zero(1)};
    p.scorers.push_back(std::move(s));
    BlockParams bp;
    for (std::size_t i = 0; i < 4; ++i) bp.layers[i] = init_layer(block.layers[i], rng);
    for (auto& d : bp.descriptors) d = init_descriptor(cfg.channels, rng);
    p.blocks.push_back(std::move(bp));
  }
  return p;
}

// --- slots ------------------------------------------------------------------

namespace {

void append(std::vector<ad::ParamSlot>& out, std::vector<ad::ParamSlot> more) {
  for (auto& s : more) out.push_back(std::move(s));
}

void scan_slots(std::vector<ad::ParamSlot>& out, ScanOperator<double>& op, const std::string& pre) {
  if (op.kind == ScanKind::Selective) {
    auto& p = op.selective;
    out.push_back(ad::slot(pre + ".Wg", p.Wg));
    out.push_back(ad::slot(pre + ".Wu", p.Wu));
    out.push_back(ad::slot(pre + ".Wo", p.Wo));
    out.push_back(ad::slot(pre + ".bg", p.bg));
    out.push_back(ad::slot(pre + ".bu", p.bu));
    out.push_back(ad::slot(pre + ".bo", p.bo));
  } else {
    auto& p = op.wkv;
    out.push_back(ad::slot(pre + ".Wr", p.Wr));
    out.push_back(ad::slot(pre + ".Wk", p.Wk));
    out.push_back(ad::slot(pre + ".Wv", p.Wv));
    out.push_back(ad::slot(pre + ".w", p.w));
    out.push_back(ad::slot(pre + ".u", p.u));
  }
}

}  // namespace

std::vector<ad::ParamSlot> param_slots(VfeParams& p, const std::string& prefix) {
  return {ad::slot(prefix + ".W1", p.W1), ad::slot(prefix + ".b1", p.b1),
          ad::slot(prefix + ".W2", p.W2), ad::slot(prefix + ".b2", p.b2)};
}

std::vector<ad::ParamSlot> param_slots(LayerParams& p, const std::string& prefix) {
  std::vector<ad::ParamSlot> out{ad::slot(prefix + ".norm_x.gamma", p.norm_x.gamma),
                                 ad::slot(prefix + ".norm_x.beta", p.norm_x.beta)};
  scan_slots(out, p.scan_x, prefix + ".scan_x");
  out.push_back(ad::slot(prefix + ".norm_y.gamma", p.norm_y.gamma));
  out.push_back(ad::slot(prefix + ".norm_y.beta", p.norm_y.beta));
  scan_slots(out, p.scan_y, prefix + ".scan_y");
  return out;
}

std::vector<ad::ParamSlot> param_slots(DescriptorParams& p, const std::string& prefix) {
  return {ad::slot(prefix + ".weights", p.weights), ad::slot(prefix + ".bias", p.bias),
          ad::slot(prefix + ".norm.gamma", p.norm.gamma),
          ad::slot(prefix + ".norm.beta", p.norm.beta)};
}

std::vector<ad::ParamSlot> param_slots(BlockParams& p, const std::string& prefix) {
  std::vector<ad::ParamSlot> out;
  for (std::size_t i = 0; i < p.layers.size(); ++i)
    append(out, param_slots(p.layers[i], prefix + ".layer" + std::to_string(i)));
  for (std::size_t i = 0; i < p.descriptors.size(); ++i)
    append(out, param_slots(p.descriptors[i], prefix + ".desc" + std::to_string(i)));
  return out;
}

std::vector<ad::ParamSlot> param_slots(BackboneParams& p) {
  std::vector<ad::ParamSlot> out = param_slots(p.vfe);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    out.push_back(ad::slot("scorer" + std::to_string(i) + ".w", p.scorers[i].w));
    out.push_back(ad::slot("scorer" + std::to_string(i) + ".b", p.scorers[i].b));
    append(out, param_slots(p.blocks[i], "block" + std::to_string(i)));
  }
  return out;
}

// --- tape forms -------------------------------------------------------------

SparseVar constant(ad::Tape& t, const SparseFeatureSetd& set) {
  return {set.coords, t.constant(set.features), set.grid};
}

SparseFeatureSetd value(const ad::Tape& t, const SparseVar& v) {
  return {v.coords, t.value(v.features), v.grid};
}

SparseVar vfe(ad::Tape& t, const SparseVar& raw, const VfeParams& p) {
  require_dims(t.value(raw.features).cols() == p.W1.cols(), "vfe: raw channels do not match params");
  ad::Var h = ad::affine(t, raw.features, t.param(p.W1), t.param(p.b1));
  h = ad::gelu(t, h);
  h = ad::affine(t, h, t.param(p.W2), t.param(p.b2));
  return {raw.coords, h, raw.grid};
}

namespace {

ad::Var norm(ad::Tape& t, ad::Var x, const NormParams& p) {
  return ad::layer_norm(t, x, t.param(p.gamma), t.param(p.beta));
}

ad::Var residual_scan(ad::Tape& t, const SparseVar& x, const LayerConfig& cfg, AxisOrder order,
                      const NormParams& np, const ScanOperator<double>& op) {
  const GroupLayout layout = partition(x.coords, x.grid.extent, cfg.window, order, cfg.group_size);
  const ad::Var y = ad::group_scan(t, norm(t, x.features, np), layout, op);
  return ad::add(t, x.features, y);
}

struct Merged {
  SparseVar coarse;
  IndexMap map;
};

Merged merge(ad::Tape& t, const SparseVar& x, const Eigen::Vector3i& stride) {
  IndexMap map = build_index_map(x.coords, stride, x.grid);
  SparseVar coarse{map.coarse_coords, ad::segment_mean(t, x.features, map), map.coarse_grid};
  return {std::move(coarse), std::move(map)};
}

SparseVar expand(ad::Tape& t, const SparseVar& coarse, const IndexMap& map) {
  return {map.fine_coords, ad::gather_rows(t, coarse.features, map.parent_of), map.fine_grid};
}

}  // namespace

SparseVar unilion_layer(ad::Tape& t, const SparseVar& x, const LayerConfig& cfg,
                        const LayerParams& p) {
  require_dims(t.value(x.features).cols() == cfg.channels, "unilion_layer: channel mismatch");
  const SparseVar x1{x.coords, residual_scan(t, x, cfg, AxisOrder::XMajor, p.norm_x, p.scan_x), x.grid};
  return {x.coords, residual_scan(t, x1, cfg, AxisOrder::YMajor, p.norm_y, p.scan_y), x.grid};
}

SparseVar descriptor(ad::Tape& t, const SparseVar& x, const DescriptorParams& p) {
  const NeighborTable table = build_neighbor_table(x.coords);
  ad::Var h = ad::submanifold_conv3(t, x.features, table, t.param(p.weights), t.param(p.bias));
  h = norm(t, h, p.norm);
  return {x.coords, ad::gelu(t, h), x.grid};
}

SparseVar unilion_block(ad::Tape& t, const SparseVar& x, const BlockConfig& cfg,
                        const BlockParams& p) {
  if (x.size() == 0) return x;
  const SparseVar l1 = unilion_layer(t, x, cfg.layers[0], p.layers[0]);
  const Merged half = merge(t, descriptor(t, l1, p.descriptors[0]), cfg.merge_half);
  const SparseVar l2 = unilion_layer(t, half.coarse, cfg.layers[1], p.layers[1]);
  const Merged quarter = merge(t, descriptor(t, l2, p.descriptors[1]), cfg.merge_quarter);
  const SparseVar l3 = unilion_layer(t, quarter.coarse, cfg.layers[2], p.layers[2]);

  SparseVar up = expand(t, l3, quarter.map);
  up.features = ad::add(t, up.features, l2.features);
  const SparseVar l4 = unilion_layer(t, up, cfg.layers[3], p.layers[3]);

  SparseVar out = expand(t, l4, half.map);
  out.features = ad::add(t, out.features, l1.features);
  return descriptor(t, out, p.descriptors[2]);
}

SparseVar voxel_generate(ad::Tape& t, const SparseVar& x, std::span<const VoxelCoord> pm,
                         std::span<const Eigen::Vector3i> offsets) {
  GenerationPlan plan = plan_generation(x.coords, x.grid, pm, offsets);
  return {std::move(plan.coords), ad::gather_rows(t, x.features, std::move(plan.source)), x.grid};
}

Index batch_count(std::span<const VoxelCoord> coords) {
  int b = 0;
  for (const auto& c : coords) b = std::max(b, c.batch);
  return static_cast<Index>(b) + 1;
}

ad::Var flatten_bev(ad::Tape& t, const SparseVar& x, Index batches) {
  const Index H = x.grid.extent.x();
  const Index W = x.grid.extent.y();
  std::vector<Index> target(x.coords.size());
  for (std::size_t i = 0; i < x.coords.size(); ++i) {
    const VoxelCoord& c = x.coords[i];
    target[i] = (static_cast<Index>(c.batch) * H + c.x) * W + c.y;
  }
  return ad::scatter_sum(t, x.features, std::move(target), batches * H * W);
}

ad::Var backbone_forward(ad::Tape& t, const SparseVar& x, const BackboneConfig& cfg,
                         const BackboneParams& p, BackboneTrace* trace) {
  cfg.validate();
  require_dims(p.blocks.size() == cfg.blocks.size() && p.scorers.size() == cfg.blocks.size(),
               "backbone_forward: params do not match block count");
  require_dims(t.value(x.features).cols() == cfg.channels, "backbone_forward: channel mismatch");
  const Index batches = batch_count(x.coords);
  SparseVar cur = x;
  if (trace != nullptr) trace->add("input", cur.size());
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const std::string tag = "block" + std::to_string(i);
    const auto rows = select_foreground(t.value(cur.features), p.scorers[i], cfg.ratio);
    std::vector<VoxelCoord> pm;
    pm.reserve(rows.size());
    for (Index r : rows) pm.push_back(cur.coords[static_cast<std::size_t>(r)]);
    GenerationPlan plan = plan_generation(cur.coords, cur.grid, pm, cfg.offsets);
    if (trace != nullptr) trace->generated.push_back(plan.generated);
    cur = {std::move(plan.coords), ad::gather_rows(t, cur.features, std::move(plan.source)), cur.grid};
    if (trace != nullptr) trace->add(tag + ".generate", cur.size());

    cur = unilion_block(t, cur, cfg.blocks[i], p.blocks[i]);
    if (trace != nullptr) trace->add(tag + ".block", cur.size());

    cur = merge(t, cur, cfg.height_stride).coarse;
    if (trace != nullptr) trace->add(tag + ".height_merge", cur.size());
  }
  return flatten_bev(t, cur, batches);
}

// --- plain forms ------------------------------------------------------------

SparseFeatureSetd vfe(const SparseFeatureSetd& raw, const VfeParams& p) {
  ad::Tape t(false);
  return value(t, vfe(t, constant(t, raw), p));
}

SparseFeatureSetd unilion_layer(const SparseFeatureSetd& x, const LayerConfig& cfg,
                                const LayerParams& p) {
  ad::Tape t(false);
  return value(t, unilion_layer(t, constant(t, x), cfg, p));
}

SparseFeatureSetd descriptor(const SparseFeatureSetd& x, const DescriptorParams& p) {
  ad::Tape t(false);
  return value(t, descriptor(t, constant(t, x), p));
}

SparseFeatureSetd unilion_block(const SparseFeatureSetd& x, const BlockConfig& cfg,
                                const BlockParams& p) {
  ad::Tape t(false);
  return value(t, unilion_block(t, constant(t, x), cfg, p));
}

std::vector<Index> select_foreground(const Eigen::MatrixXd& features, const ScorerParams& p,
                                     double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("select_foreground: ratio must lie in (0, 1]");
  require_dims(p.w.rows() == 1 && p.w.cols() == features.cols() && p.b.size() == 1,
               "select_foreground: scorer does not match channels");
  const Index L = features.rows();
  // ceil(r L) with a 1e-9 guard
  const Index k = std::min<Index>(L, static_cast<Index>(std::ceil(ratio * static_cast<double>(L) - 1e-9)));
  Eigen::VectorXd score(L);
  for (Index i = 0; i < L; ++i) {
    double s = p.b[0];
    for (Index c = 0; c < features.cols(); ++c) s += p.w(0, c) * features(i, c);
    score[i] = s;
  }
  std::vector<Index> order(static_cast<std::size_t>(L));
  std::iota(order.begin(), order.end(), Index{0});
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<VoxelCoord> select_foreground(const SparseFeatureSetd& set, const ScorerParams& p,
                                          double ratio) {
  std::vector<VoxelCoord> out;
  for (Index r : select_foreground(set.features, p, ratio)) out.push_back(set.coords[static_cast<std::size_t>(r)]);
  return out;
}

GenerationPlan plan_generation(std::span<const VoxelCoord> coords, const VoxelGrid& grid,
                               std::span<const VoxelCoord> pm,
                               std::span<const Eigen::Vector3i> offsets) {
  std::unordered_set<VoxelCoord, VoxelCoordHash> occupied(coords.begin(), coords.end());
  GenerationPlan plan;
  std::unordered_set<VoxelCoord, VoxelCoordHash> added;
  for (const VoxelCoord& p : pm) {
    if (!occupied.count(p)) throw std::invalid_argument("voxel_generate: seed coordinate not in set");
    for (const auto& o : offsets) {
      const VoxelCoord c{p.batch, p.x + o.x(), p.y + o.y(), p.z + o.z()};
      if (!grid.contains(c) || occupied.count(c) || !added.insert(c).second) continue;
      plan.generated.push_back(c);
    }
  }

  std::vector<VoxelCoord> all(coords.begin(), coords.end());
  all.insert(all.end(), plan.generated.begin(), plan.generated.end());
  const auto order = canonical_order(all);
  const Index n = static_cast<Index>(coords.size());
  plan.coords.reserve(all.size());
  plan.source.reserve(all.size());
  for (Index i : order) {
    plan.coords.push_back(all[static_cast<std::size_t>(i)]);
    plan.source.push_back(i < n ? i : -1);
  }
  return plan;
}

SparseFeatureSetd voxel_generate(const SparseFeatureSetd& set, std::span<const VoxelCoord> pm,
                                 std::span<const Eigen::Vector3i> offsets) {
  const GenerationPlan plan = plan_generation(set.coords, set.grid, pm, offsets);
  return {plan.coords, gather_rows<double>(set.features, plan.source), set.grid};
}

SparseFeatureSetd voxel_generate(const SparseFeatureSetd& set, std::span<const VoxelCoord> pm) {
  const auto offsets = default_generation_offsets();
  return voxel_generate(set, pm, offsets);
}

VoxelGrid final_grid(const VoxelGrid& input, const BackboneConfig& cfg) {
  VoxelGrid g = input;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) g = g.coarsened(cfg.height_stride);
  return g;
}

DenseBEV to_bev(const VoxelGrid& grid, Index batches, const Eigen::MatrixXd& data) {
  DenseBEV bev;
  bev.H = grid.extent.x();
  bev.W = grid.extent.y();
  bev.C = data.cols();
  bev.batches = batches;
  bev.data = data;
  return bev;
}

DenseBEV backbone_forward(const SparseFeatureSetd& x, const BackboneConfig& cfg,
                          const BackboneParams& p, BackboneTrace* trace) {
  ad::Tape t(false);
  const ad::Var bev = backbone_forward(t, constant(t, x), cfg, p, trace);
  return to_bev(final_grid(x.grid, cfg), batch_count(x.coords), t.value(bev));
}

nlohmann::json DenseBEV::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < data.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < data.cols(); ++c) row.push_back(data(r, c));
    rows.push_back(std::move(row));
  }
  return {{"H", H}, {"W", W}, {"C", C}, {"batches", batches}, {"layout", "row = (b*H + x)*W + y"},
          {"data", std::move(rows)}};
}

}  // namespace unilion
