#include <doctest.h>

#include "support.hpp"
#include "unilion/tasks.hpp"

#include <numbers>

using namespace unilion;

namespace {

DenseBEV bev_of(const Eigen::MatrixXd& data, Index H, Index W) {
  DenseBEV b;
  b.H = H;
  b.W = W;
  b.C = data.cols();
  b.data = data;
  return b;
}

TaskTargets all_targets(Rng& rng, Index cells, Index classes) {
  TaskTargets t;
  Eigen::MatrixXd heat = rng.uniform_matrix(cells, 1, 0.0, 0.9);
  heat(0, 0) = heat(cells / 2, 0) = 1.0;
  t.heatmap = heat;
  Eigen::MatrixXd occ(cells, 1);
  for (Index i = 0; i < cells; ++i) occ(i, 0) = rng.uniform() < 0.5 ? 1.0 : 0.0;
  t.occupancy = occ;
  std::vector<int> labels(static_cast<std::size_t>(cells));
  for (auto& l : labels) l = rng.uniform_int(0, static_cast<int>(classes) - 1);
  t.map_labels = labels;
  t.motion = rng.normal_matrix(cells, 2, 1.5);
  t.motion_mask.assign(static_cast<std::size_t>(cells), 0);
  for (Index i = 0; i < cells; i += 3) t.motion_mask[static_cast<std::size_t>(i)] = 1;
  t.plan = rng.normal_matrix(1, 2);
  return t;
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double smooth_l1(double d) { return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; }

}  // namespace

TEST_CASE("dynamic weight examples") {
  CHECK(dynamic_weight(2.0, 4.0) == doctest::Approx(0.4999987).epsilon(1e-7));
  CHECK(dynamic_weight(2.0, 4.0) == 2.0 / (4.0 + 1e-5));
  CHECK(dynamic_weight(3.0, 0.0) == 3.0 / 1e-5);
}

TEST_CASE("weighted terms align with the detection loss") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double det = rng.uniform(0.0, 10.0);
    const double task = rng.uniform(0.01, 10.0);
    const double w = dynamic_weight(det, task);
    CHECK(std::abs(w * task - det) <= det * (1e-5 / task) * (1 + 1e-9) + 1e-15);
  }
}

TEST_CASE("total loss by hand") {
  TaskLosses l;
  l.det = 2.0;
  l.map = 4.0;
  l.occ = 1.0;
  const double hand = 2.0 + 0.5 * (2.0 / (4.0 + 1e-5)) * 4.0 + 1.0 * (2.0 / (1.0 + 1e-5)) * 1.0;
  CHECK(total_loss(l) == doctest::Approx(hand).epsilon(1e-15));
  CHECK(total_loss(l) == doctest::Approx(5.0).epsilon(1e-4));

  l.mot = 0.7;
  l.plan = 1.9;
  const LossWeights lam{1.0, 0.5, 1.0, 1.0, 1.0};
  CHECK(total_loss(l, lam) == doctest::Approx(hand + 0.7 + 1.9).epsilon(1e-15));

  const LossWeights odd{0.3, 2.0, 0.7, 1.5, 0.25};
  const double w_map = 2.0 / (4.0 + 1e-5), w_occ = 2.0 / (1.0 + 1e-5);
  CHECK(total_loss(l, odd) ==
        doctest::Approx(0.3 * 2.0 + 2.0 * w_map * 4.0 + 0.7 * w_occ * 1.0 + 1.5 * 0.7 + 0.25 * 1.9)
            .epsilon(1e-15));
}

TEST_CASE("detection only and the missing-detection error") {
  TaskLosses l;
  l.det = 1.25;
  CHECK(total_loss(l) == 1.25);

  TaskLosses bad;
  bad.occ = 1.0;
  CHECK_THROWS_AS(total_loss(bad), std::invalid_argument);
  bad.occ.reset();
  bad.map = 1.0;
  CHECK_THROWS_AS(total_loss(bad), std::invalid_argument);

  // motion and planning carry no dynamic weight, so they need no detection
  TaskLosses mp;
  mp.mot = 1.0;
  mp.plan = 2.0;
  CHECK(total_loss(mp) == 3.0);

  TaskLosses neg;
  neg.det = -1.0;
  CHECK_THROWS_AS(total_loss(neg), std::invalid_argument);
}

TEST_CASE("total loss is monotone in each term at detached weights") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    TaskLosses l;
    l.det = rng.uniform(0.1, 3.0);
    l.map = rng.uniform(0.1, 3.0);
    l.occ = rng.uniform(0.1, 3.0);
    l.mot = rng.uniform(0.0, 3.0);
    l.plan = rng.uniform(0.0, 3.0);
    const LossCoefficients c = loss_coefficients(l);
    CHECK(c.det >= 0);
    CHECK(c.map >= 0);
    CHECK(c.occ >= 0);
    CHECK(c.mot >= 0);
    CHECK(c.plan >= 0);
    const double at = c.det * *l.det + c.map * *l.map + c.occ * *l.occ + c.mot * *l.mot + c.plan * *l.plan;
    CHECK(at == doctest::Approx(total_loss(l)).epsilon(1e-14));
  }
}

TEST_CASE("random logits on balanced occupancy give ln 2") {
  double mean = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const Index n = 2000;
    Eigen::MatrixXd target(n, 1);
    for (Index i = 0; i < n; ++i) target(i, 0) = static_cast<double>(i % 2);
    ad::Tape t(false);
    const ad::Var z = t.constant(rng.uniform_matrix(n, 1, -0.2, 0.2));
    mean += t.value(ad::bce_with_logits(t, z, target))(0, 0) / 20.0;
  }
  CHECK(std::abs(mean - std::numbers::ln2) <= 0.05);
}

TEST_CASE("zero BEV and zero heads give the constant-prediction baselines") {
  Rng rng(3);
  const Index H = 6, W = 5, cells = H * W, K = 3;
  const TaskTargets tg = all_targets(rng, cells, K);
  const TaskLosses l = toy_heads(bev_of(Eigen::MatrixXd::Zero(cells, 4), H, W), HeadParams::zeros(4, K), tg);

  // focal at p = 1/2
  double focal = 0.0;
  int pos = 0;
  for (Index i = 0; i < cells; ++i) {
    const double y = (*tg.heatmap)(i, 0);
    if (y == 1.0) {
      focal += 0.25 * std::numbers::ln2;
      ++pos;
    } else {
      focal += std::pow(1.0 - y, 4) * 0.25 * std::numbers::ln2;
    }
  }
  CHECK(*l.det == doctest::Approx(focal / pos).epsilon(1e-14));
  CHECK(*l.occ == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  CHECK(*l.map == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  double mot = 0.0;
  int active = 0;
  for (Index i = 0; i < cells; ++i)
    if (tg.motion_mask[static_cast<std::size_t>(i)]) {
      mot += smooth_l1((*tg.motion)(i, 0)) + smooth_l1((*tg.motion)(i, 1));
      ++active;
    }
  CHECK(*l.mot == doctest::Approx(mot / (2 * active)).epsilon(1e-14));
  CHECK(*l.plan == doctest::Approx((smooth_l1((*tg.plan)(0, 0)) + smooth_l1((*tg.plan)(0, 1))) / 2).epsilon(1e-14));
}

TEST_CASE("perfect predictions sit at the loss floor") {
  const Index H = 4, W = 4, cells = H * W;
  Eigen::MatrixXd data = Eigen::MatrixXd::Constant(cells, 2, -1.0);
  data(5, 0) = 1.0;
  TaskTargets tg;
  Eigen::MatrixXd heat = Eigen::MatrixXd::Zero(cells, 1);
  heat(5, 0) = 1.0;
  tg.heatmap = heat;
  Eigen::MatrixXd occ = Eigen::MatrixXd::Zero(cells, 1);
  occ(5, 0) = 1.0;
  tg.occupancy = occ;
  auto p = HeadParams::zeros(2, 2);
  p.W_det(0, 0) = 60.0;
  p.W_occ(0, 0) = 60.0;
  const TaskLosses l = toy_heads(bev_of(data, H, W), p, tg);
  CHECK(*l.det < 1e-20);
  CHECK(*l.occ < 1e-20);
}

TEST_CASE("heads are independent of each other") {
  Rng rng(4);
  const Index H = 5, W = 4, cells = H * W;
  const DenseBEV bev = bev_of(rng.normal_matrix(cells, 3), H, W);
  const HeadParams p = HeadParams::init(3, 4, rng);
  const TaskTargets full = all_targets(rng, cells, 4);
  const TaskLosses a = toy_heads(bev, p, full);
  for (int drop = 0; drop < 5; ++drop) {
    TaskTargets t = full;
    if (drop == 0) t.heatmap.reset();
    if (drop == 1) t.map_labels.reset();
    if (drop == 2) t.occupancy.reset();
    if (drop == 3) t.motion.reset();
    if (drop == 4) t.plan.reset();
    const TaskLosses b = toy_heads(bev, p, t);
    CHECK(b.det.has_value() == (drop != 0));
    if (b.det) CHECK(*b.det == *a.det);
    if (b.map) CHECK(*b.map == *a.map);
    if (b.occ) CHECK(*b.occ == *a.occ);
    if (b.mot) CHECK(*b.mot == *a.mot);
    if (b.plan) CHECK(*b.plan == *a.plan);
  }
}

TEST_CASE("head shape checks") {
  Rng rng(5);
  const DenseBEV bev = bev_of(rng.normal_matrix(12, 3), 3, 4);
  TaskTargets t;
  t.occupancy = Eigen::MatrixXd::Zero(11, 1);
  CHECK_THROWS_AS(toy_heads(bev, HeadParams::zeros(3, 2), t), DimensionMismatch);
}

TEST_CASE("occupancy loss matches its formula") {
  Rng rng(6);
  const DenseBEV bev = bev_of(rng.normal_matrix(20, 3), 4, 5);
  const HeadParams p = HeadParams::init(3, 2, rng);
  TaskTargets t;
  Eigen::MatrixXd occ(20, 1);
  for (Index i = 0; i < 20; ++i) occ(i, 0) = i % 3 == 0;
  t.occupancy = occ;
  double expect = 0.0;
  for (Index i = 0; i < 20; ++i) {
    const double z = p.W_occ.row(0).dot(bev.data.row(i)) + p.b_occ[0];
    expect += softplus(z) - occ(i, 0) * z;
  }
  CHECK(*toy_heads(bev, p, t).occ == doctest::Approx(expect / 20).epsilon(1e-13));
}
