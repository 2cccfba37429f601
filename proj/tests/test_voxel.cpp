#include <doctest.h>

#include "support.hpp"

#include <set>

using namespace unilion;
using testsupport::key;

namespace {

VoxelGrid unit_grid() {
  VoxelGrid g;
  g.origin = Eigen::Vector3d::Zero();
  g.voxel_size = Eigen::Vector3d(0.3, 0.3, 0.25);
  g.extent = Eigen::Vector3i(20, 20, 8);
  return g;
}

PointCloud cloud(std::initializer_list<std::array<double, 4>> rows) {
  PointCloud pc;
  pc.points.resize(static_cast<Index>(rows.size()), 4);
  Index i = 0;
  for (const auto& r : rows) {
    for (int k = 0; k < 4; ++k) pc.points(i, k) = r[static_cast<std::size_t>(k)];
    ++i;
  }
  return pc;
}

}  // namespace

TEST_CASE("single point lands in the floor cell") {
  const auto s = voxelize(cloud({{0.15, 0.15, 0.10, 1.0}}), unit_grid());
  REQUIRE(s.size() == 1);
  CHECK(s.coords[0] == VoxelCoord{0, 0, 0, 0});
  CHECK(s.channels() == voxel_feature_channels(1));
  // offsets from the cell center (0.15, 0.15, 0.125)
  CHECK(s.features(0, 4) == doctest::Approx(0.0));
  CHECK(s.features(0, 6) == doctest::Approx(-0.025));
}

TEST_CASE("two points in one voxel average their attribute") {
  const auto s = voxelize(cloud({{0.1, 0.1, 0.1, 2.0}, {0.2, 0.2, 0.2, 4.0}}), unit_grid());
  REQUIRE(s.size() == 1);
  CHECK(s.features(0, 3) == 3.0);
  CHECK(s.features(0, 0) == doctest::Approx(0.15));
}

TEST_CASE("empty cloud gives an empty set") {
  PointCloud pc;
  const auto s = voxelize(pc, unit_grid());
  CHECK(s.empty());
  CHECK(s.channels() == 7);
}

TEST_CASE("voxel count matches a hash-set of floor indices") {
  Rng rng(11);
  const VoxelGrid g = unit_grid();
  PointCloud pc;
  pc.points = Eigen::MatrixXd(1000, 4);
  for (Index i = 0; i < 1000; ++i) {
    // a margin outside the extent so some points are dropped
    pc.points(i, 0) = rng.uniform(-0.5, 6.5);
    pc.points(i, 1) = rng.uniform(-0.5, 6.5);
    pc.points(i, 2) = rng.uniform(-0.2, 2.2);
    pc.points(i, 3) = rng.uniform();
  }
  std::set<std::tuple<int, int, int>> cells;
  for (Index i = 0; i < 1000; ++i) {
    const int x = static_cast<int>(std::floor(pc.points(i, 0) / 0.3));
    const int y = static_cast<int>(std::floor(pc.points(i, 1) / 0.3));
    const int z = static_cast<int>(std::floor(pc.points(i, 2) / 0.25));
    if (x < 0 || y < 0 || z < 0 || x >= 20 || y >= 20 || z >= 8) continue;
    cells.insert({x, y, z});
  }
  const auto s = voxelize(pc, g);
  CHECK(static_cast<std::size_t>(s.size()) == cells.size());
  CHECK(is_canonical(s.coords));
  for (const auto& c : s.coords) {
    CHECK(g.contains(c));
    CHECK(cells.count({c.x, c.y, c.z}) == 1);
  }
}

TEST_CASE("voxelize ignores point order") {
  Rng rng(3);
  const VoxelGrid g = unit_grid();
  PointCloud pc;
  pc.points = Eigen::MatrixXd(500, 4);
  for (Index i = 0; i < 500; ++i) {
    pc.points(i, 0) = rng.uniform(0.0, 1.5);
    pc.points(i, 1) = rng.uniform(0.0, 1.5);
    pc.points(i, 2) = rng.uniform(0.0, 1.0);
    pc.points(i, 3) = rng.normal();
  }
  std::vector<Index> perm(500);
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = 499; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, static_cast<int>(i))]);
  PointCloud shuffled;
  shuffled.points = gather_rows<double>(pc.points, perm);

  const auto a = voxelize(pc, g);
  const auto b = voxelize(shuffled, g);
  REQUIRE(a.coords == b.coords);
  CHECK((a.features.array() == b.features.array()).all());
}

TEST_CASE("canonicalize sorts, is idempotent and rejects duplicates") {
  SparseFeatureSetd s;
  s.grid = unit_grid();
  s.coords = {{0, 2, 0, 1}, {0, 1, 1, 0}, {0, 0, 0, 0}};
  s.features = Eigen::MatrixXd(3, 1);
  s.features << 30, 20, 10;

  const auto c = canonicalize(s);
  CHECK(c.coords[0] == VoxelCoord{0, 0, 0, 0});
  CHECK(c.coords[1] == VoxelCoord{0, 1, 1, 0});
  CHECK(c.coords[2] == VoxelCoord{0, 2, 0, 1});
  CHECK(c.features(0, 0) == 10);
  CHECK(c.features(1, 0) == 20);
  CHECK(c.features(2, 0) == 30);

  const auto cc = canonicalize(c);
  CHECK(cc.coords == c.coords);
  CHECK(cc.features == c.features);

  s.coords[2] = s.coords[0];
  CHECK_THROWS_AS(canonicalize(s), DuplicateCoordinate);
}

TEST_CASE("canonical order is batch, z, y, x") {
  Rng rng(5);
  auto coords = testsupport::random_coords(rng, {6, 5, 4}, 80, 2);
  std::vector<std::tuple<int, int, int, int>> expect;
  for (const auto& c : coords) expect.emplace_back(c.batch, c.z, c.y, c.x);
  std::sort(expect.begin(), expect.end());
  SparseFeatureSetd s;
  s.grid = testsupport::make_grid(6, 5, 4);
  s.coords = coords;
  s.features = Eigen::MatrixXd::Zero(static_cast<Index>(coords.size()), 1);
  const auto c = canonicalize(s);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(std::make_tuple(c.coords[i].batch, c.coords[i].z, c.coords[i].y, c.coords[i].x) ==
          expect[i]);
}
