#pragma once

// Shared helpers for the unit and acceptance tests: random scenes and
// independent reference implementations written straight from the operator
// definitions.

#include "unilion/linrnn.hpp"
#include "unilion/partition.hpp"
#include "unilion/rng.hpp"
#include "unilion/sparse_ops.hpp"
#include "unilion/voxel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <tuple>
#include <unordered_set>
#include <vector>

namespace testsupport {

using namespace unilion;

inline auto key(const VoxelCoord& c) { return std::make_tuple(c.batch, c.x, c.y, c.z); }

// max |a - b| / max(max |b|, tiny)
template <typename A, typename B>
double normwise_error(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double diff = (a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff();
  const double scale = b.template cast<double>().cwiseAbs().maxCoeff();
  if (a.size() == 0) return 0.0;
  return diff / std::max(scale, std::numeric_limits<double>::min());
}

inline VoxelGrid make_grid(int H, int W, int D, double pitch = 0.5) {
  VoxelGrid g;
  g.origin = Eigen::Vector3d(-0.5 * H * pitch, -0.5 * W * pitch, -1.0);
  g.voxel_size = Eigen::Vector3d(pitch, pitch, pitch);
  g.extent = Eigen::Vector3i(H, W, D);
  return g;
}

// n distinct coordinates inside `extent`, in draw order.
inline std::vector<VoxelCoord> random_coords(Rng& rng, const Eigen::Vector3i& extent, Index n,
                                             int batches = 1) {
  const Index cells = static_cast<Index>(extent.prod()) * batches;
  n = std::min(n, cells);
  std::unordered_set<VoxelCoord, VoxelCoordHash> seen;
  std::vector<VoxelCoord> out;
  while (static_cast<Index>(out.size()) < n) {
    VoxelCoord c{rng.uniform_int(0, batches - 1), rng.uniform_int(0, extent.x() - 1),
                 rng.uniform_int(0, extent.y() - 1), rng.uniform_int(0, extent.z() - 1)};
    if (seen.insert(c).second) out.push_back(c);
  }
  return out;
}

inline SparseFeatureSetd random_set(Rng& rng, const VoxelGrid& grid, Index n, Index C,
                                    int batches = 1) {
  SparseFeatureSetd s;
  s.grid = grid;
  s.coords = random_coords(rng, grid.extent, n, batches);
  s.features = rng.normal_matrix(static_cast<Index>(s.coords.size()), C);
  return canonicalize(s);
}

inline Mask random_mask(Rng& rng, Index T, double keep) {
  Mask m(static_cast<std::size_t>(T));
  for (auto& v : m) v = rng.uniform() < keep ? 1 : 0;
  return m;
}

inline SelectiveScanParams<double> random_selective(Rng& rng, Index C) {
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  return {rng.normal_matrix(C, C, s), rng.normal_matrix(C, C, s), rng.normal_matrix(C, C, s),
          rng.normal_vector(C),       rng.normal_vector(C),       rng.normal_vector(C)};
}

inline WKVScanParams<double> random_wkv(Rng& rng, Index C) {
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  return {rng.normal_matrix(C, C, s), rng.normal_matrix(C, C, s), rng.normal_matrix(C, C, s),
          rng.uniform_matrix(C, 1, 0.0, 2.0), rng.normal_vector(C)};
}

inline double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Per-step loop: pre = b_j + sum_k W_jk x_k, ascending k.
template <typename Scalar>
MatrixX<Scalar> selective_loop(const MatrixX<Scalar>& x, const SelectiveScanParams<Scalar>& p,
                               const Mask& mask = {}) {
  const Index T = x.rows(), C = p.Wg.rows();
  MatrixX<Scalar> y = MatrixX<Scalar>::Zero(T, C);
  std::vector<Scalar> h(static_cast<std::size_t>(C), Scalar(0));
  for (Index t = 0; t < T; ++t) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(t)]) continue;
    for (Index j = 0; j < C; ++j) {
      Scalar g = p.bg[j], u = p.bu[j], o = p.bo[j];
      for (Index k = 0; k < C; ++k) {
        g += p.Wg(j, k) * x(t, k);
        u += p.Wu(j, k) * x(t, k);
        o += p.Wo(j, k) * x(t, k);
      }
      g = Scalar(1) / (Scalar(1) + std::exp(-g));
      o = o * (Scalar(1) / (Scalar(1) + std::exp(-o)));
      auto& hj = h[static_cast<std::size_t>(j)];
      hj = g * hj + (Scalar(1) - g) * u;
      y(t, j) = hj * o;
    }
  }
  return y;
}

// y_t = sigmoid(r_t) (sum_{s<t} e^{-(t-s) w + k_s} v_s + e^{u + k_t} v_t) /
//                    (sum_{s<t} e^{-(t-s) w + k_s} + e^{u + k_t} + eps)
// over valid positions only, evaluated with one max shift per output.
inline Eigen::MatrixXd wkv_quadratic(const Eigen::MatrixXd& x, const WKVScanParams<double>& p,
                                     const Mask& mask = {}) {
  const Index T = x.rows(), C = p.Wr.rows();
  std::vector<Index> valid;
  for (Index t = 0; t < T; ++t)
    if (mask.empty() || mask[static_cast<std::size_t>(t)]) valid.push_back(t);
  const Eigen::MatrixXd r = x * p.Wr.transpose();
  const Eigen::MatrixXd k = x * p.Wk.transpose();
  const Eigen::MatrixXd v = x * p.Wv.transpose();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(T, C);
  std::vector<double> e;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    const Index t = valid[i];
    for (Index c = 0; c < C; ++c) {
      e.assign(i + 1, 0.0);
      for (std::size_t j = 0; j < i; ++j)
        e[j] = -static_cast<double>(i - j) * p.w[c] + k(valid[j], c);
      e[i] = p.u[c] + k(t, c);
      const double m = *std::max_element(e.begin(), e.end());
      double num = 0.0, den = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        const double a = std::exp(e[j] - m);
        num += a * v(valid[j], c);
        den += a;
      }
      den += kWkvEpsilon * std::exp(-m);
      y(t, c) = sig(r(t, c)) * num / den;
    }
  }
  return y;
}

// Dense 3x3x3 convolution over the whole grid with empty cells at zero, read
// back at the occupied cells.
inline Eigen::MatrixXd dense_conv_oracle(const SparseFeatureSetd& s, const ConvKernel3<double>& k) {
  const Index cin = k.in_channels(), cout = k.out_channels();
  std::map<std::tuple<int, int, int, int>, Index> at;
  for (Index i = 0; i < s.size(); ++i) at[key(s.coords[static_cast<std::size_t>(i)])] = i;
  const Eigen::Vector3i e = s.grid.extent;
  int batches = 0;
  for (const auto& c : s.coords) batches = std::max(batches, c.batch + 1);
  // dense volume, one row per (b, x, y, z) cell
  auto cell = [&](int b, int x, int y, int z) {
    return ((static_cast<Index>(b) * e.x() + x) * e.y() + y) * e.z() + z;
  };
  Eigen::MatrixXd vol = Eigen::MatrixXd::Zero(static_cast<Index>(batches) * e.prod(), cin);
  for (Index i = 0; i < s.size(); ++i) {
    const auto& c = s.coords[static_cast<std::size_t>(i)];
    vol.row(cell(c.batch, c.x, c.y, c.z)) = s.features.row(i);
  }
  Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(vol.rows(), cout);
  for (int b = 0; b < batches; ++b)
    for (int x = 0; x < e.x(); ++x)
      for (int y = 0; y < e.y(); ++y)
        for (int z = 0; z < e.z(); ++z) {
          Eigen::RowVectorXd acc = k.bias.transpose();
          for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dz = -1; dz <= 1; ++dz) {
                const int nx = x + dx, ny = y + dy, nz = z + dz;
                if (nx < 0 || ny < 0 || nz < 0 || nx >= e.x() || ny >= e.y() || nz >= e.z())
                  continue;
                acc += vol.row(cell(b, nx, ny, nz)) * k.block(kernel_offset_index(dx, dy, dz));
              }
          dense.row(cell(b, x, y, z)) = acc;
        }
  Eigen::MatrixXd out(s.size(), cout);
  for (Index i = 0; i < s.size(); ++i) {
    const auto& c = s.coords[static_cast<std::size_t>(i)];
    out.row(i) = dense.row(cell(c.batch, c.x, c.y, c.z));
  }
  return out;
}

// Order by (batch, window tuple, offset tuple) with std::sort over tuples.
// Window tuples put the major axis last (fastest); offsets put it first.
inline std::vector<Index> partition_oracle(const std::vector<VoxelCoord>& coords,
                                           const WindowShape& ws, AxisOrder order) {
  using K = std::array<int, 7>;
  std::vector<std::pair<K, Index>> keyed;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto& c = coords[i];
    const int wx = c.x / ws.sx, wy = c.y / ws.sy, wz = c.z / ws.sz;
    const int ox = c.x % ws.sx, oy = c.y % ws.sy, oz = c.z % ws.sz;
    K k = order == AxisOrder::XMajor ? K{c.batch, wz, wy, wx, ox, oy, oz}
                                     : K{c.batch, wz, wx, wy, oy, ox, oz};
    keyed.emplace_back(k, static_cast<Index>(i));
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<Index> perm;
  for (const auto& kv : keyed) perm.push_back(kv.second);
  return perm;
}

// Generated coordinates by brute force over a std::set.
inline std::set<std::tuple<int, int, int, int>> generation_oracle(
    const std::vector<VoxelCoord>& coords, const Eigen::Vector3i& extent,
    const std::vector<VoxelCoord>& pm) {
  std::set<std::tuple<int, int, int, int>> have;
  for (const auto& c : coords) have.insert(key(c));
  std::set<std::tuple<int, int, int, int>> out;
  const int off[4][2] = {{-1, -1}, {1, 1}, {1, -1}, {-1, 1}};
  for (const auto& p : pm)
    for (const auto& o : off) {
      const int x = p.x + o[0], y = p.y + o[1];
      if (x < 0 || y < 0 || x >= extent.x() || y >= extent.y()) continue;
      const auto k = std::make_tuple(p.batch, x, y, p.z);
      if (!have.count(k)) out.insert(k);
    }
  return out;
}

// Sibling-group mean broadcast for a merge stride, via std::map grouping.
inline Eigen::MatrixXd sibling_mean(const SparseFeatureSetd& s, const Eigen::Vector3i& stride) {
  std::map<std::tuple<int, int, int, int>, std::pair<Eigen::RowVectorXd, int>> groups;
  auto parent = [&](const VoxelCoord& c) {
    return std::make_tuple(c.batch, c.x / stride.x(), c.y / stride.y(), c.z / stride.z());
  };
  for (Index i = 0; i < s.size(); ++i) {
    auto [it, fresh] = groups.try_emplace(parent(s.coords[static_cast<std::size_t>(i)]),
                                          Eigen::RowVectorXd::Zero(s.channels()), 0);
    it->second.first += s.features.row(i);
    ++it->second.second;
  }
  Eigen::MatrixXd out(s.size(), s.channels());
  for (Index i = 0; i < s.size(); ++i) {
    const auto& g = groups.at(parent(s.coords[static_cast<std::size_t>(i)]));
    out.row(i) = g.first / g.second;
  }
  return out;
}

}  // namespace testsupport
