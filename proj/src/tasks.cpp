#include "unilion/tasks.hpp"

#include <cmath>
#include <stdexcept>

namespace unilion {

double dynamic_weight(double l_det, double l_task) {
  return l_det / (l_task + kTaskWeightEpsilon);
}

namespace {

void check_loss(const std::optional<double>& l, const char* name) {
  if (l && !(std::isfinite(*l) && *l >= 0.0))
    throw std::invalid_argument(std::string("total_loss: ") + name + " must be finite and >= 0");
}

}  // namespace

LossCoefficients loss_coefficients(const TaskLosses& l, const LossWeights& lambda) {
  check_loss(l.det, "l_det");
  check_loss(l.map, "l_map");
  check_loss(l.occ, "l_occ");
  check_loss(l.mot, "l_mot");
  check_loss(l.plan, "l_plan");
  if (!l.det && (l.map || l.occ))
    throw std::invalid_argument("total_loss: l_det is required when map or occupancy is present");
  LossCoefficients c;
  if (l.det) c.det = lambda.det;
  if (l.map) c.map = lambda.map * dynamic_weight(*l.det, *l.map);
  if (l.occ) c.occ = lambda.occ * dynamic_weight(*l.det, *l.occ);
  if (l.mot) c.mot = lambda.mot;
  if (l.plan) c.plan = lambda.plan;
  return c;
}

double total_loss(const TaskLosses& l, const LossWeights& lambda) {
  const LossCoefficients c = loss_coefficients(l, lambda);
  double total = 0.0;
  if (l.det) total += c.det * *l.det;
  if (l.map) total += c.map * *l.map;
  if (l.occ) total += c.occ * *l.occ;
  if (l.mot) total += c.mot * *l.mot;
  if (l.plan) total += c.plan * *l.plan;
  return total;
}

nlohmann::json TaskLosses::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  if (det) j["det"] = *det;
  if (map) j["map"] = *map;
  if (occ) j["occ"] = *occ;
  if (mot) j["mot"] = *mot;
  if (plan) j["plan"] = *plan;
  return j;
}

HeadParams HeadParams::init(Index C, Index K, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  HeadParams p;
  p.W_det = rng.normal_matrix(1, C, s);
  p.W_occ = rng.normal_matrix(1, C, s);
  p.W_map = rng.normal_matrix(K, C, s);
  p.W_mot = rng.normal_matrix(2, C, s);
  p.W_plan = rng.normal_matrix(2, C, s);
  p.b_det = Eigen::VectorXd::Constant(1, -2.0);
  p.b_occ = Eigen::VectorXd::Zero(1);
  p.b_map = Eigen::VectorXd::Zero(K);
  p.b_mot = Eigen::VectorXd::Zero(2);
  p.b_plan = Eigen::VectorXd::Zero(2);
  return p;
}

HeadParams HeadParams::zeros(Index C, Index K) {
  HeadParams p;
  p.W_det = Eigen::MatrixXd::Zero(1, C);
  p.W_occ = Eigen::MatrixXd::Zero(1, C);
  p.W_map = Eigen::MatrixXd::Zero(K, C);
  p.W_mot = Eigen::MatrixXd::Zero(2, C);
  p.W_plan = Eigen::MatrixXd::Zero(2, C);
  p.b_det = Eigen::VectorXd::Zero(1);
  p.b_occ = Eigen::VectorXd::Zero(1);
  p.b_map = Eigen::VectorXd::Zero(K);
  p.b_mot = Eigen::VectorXd::Zero(2);
  p.b_plan = Eigen::VectorXd::Zero(2);
  return p;
}

std::vector<ad::ParamSlot> param_slots(HeadParams& p, const std::string& prefix) {
  return {ad::slot(prefix + ".W_det", p.W_det),   ad::slot(prefix + ".b_det", p.b_det),
          ad::slot(prefix + ".W_occ", p.W_occ),   ad::slot(prefix + ".b_occ", p.b_occ),
          ad::slot(prefix + ".W_map", p.W_map),   ad::slot(prefix + ".b_map", p.b_map),
          ad::slot(prefix + ".W_mot", p.W_mot),   ad::slot(prefix + ".b_mot", p.b_mot),
          ad::slot(prefix + ".W_plan", p.W_plan), ad::slot(prefix + ".b_plan", p.b_plan)};
}

namespace {

ad::Var head(ad::Tape& t, ad::Var x, const Eigen::MatrixXd& W, const Eigen::VectorXd& b) {
  return ad::affine(t, x, t.param(W), t.param(b));
}

void check_rows(Index got, Index want, const char* what) {
  require_dims(got == want, std::string("toy_heads: ") + what + " rows do not match BEV cells");
}

}  // namespace

TaskVars toy_heads(ad::Tape& t, ad::Var bev, const HeadParams& p, const TaskTargets& targets) {
  const Index cells = t.value(bev).rows();
  TaskVars out;
  if (targets.heatmap) {
    check_rows(targets.heatmap->rows(), cells, "heatmap");
    out.det = ad::focal_loss(t, head(t, bev, p.W_det, p.b_det), *targets.heatmap);
  }
  if (targets.map_labels) {
    check_rows(static_cast<Index>(targets.map_labels->size()), cells, "map label");
    out.map = ad::softmax_cross_entropy(t, head(t, bev, p.W_map, p.b_map), *targets.map_labels);
  }
  if (targets.occupancy) {
    check_rows(targets.occupancy->rows(), cells, "occupancy");
    out.occ = ad::bce_with_logits(t, head(t, bev, p.W_occ, p.b_occ), *targets.occupancy);
  }
  if (targets.motion) {
    check_rows(targets.motion->rows(), cells, "motion");
    std::vector<std::uint8_t> mask = targets.motion_mask;
    if (mask.empty()) mask.assign(static_cast<std::size_t>(cells), 1);
    out.mot = ad::smooth_l1(t, head(t, bev, p.W_mot, p.b_mot), *targets.motion, std::move(mask));
  }
  if (targets.plan) {
    require_dims(targets.plan->rows() == 1 && targets.plan->cols() == 2, "toy_heads: plan target is 1 x 2");
    const ad::Var pooled = ad::mean_rows(t, bev);
    out.plan = ad::smooth_l1(t, head(t, pooled, p.W_plan, p.b_plan), *targets.plan, {1});
  }
  return out;
}

TaskLosses values(const ad::Tape& t, const TaskVars& v) {
  auto get = [&](const std::optional<ad::Var>& x) -> std::optional<double> {
    if (!x) return std::nullopt;
    return t.value(*x)(0, 0);
  };
  return {get(v.det), get(v.map), get(v.occ), get(v.mot), get(v.plan)};
}

ad::Var total_loss(ad::Tape& t, const TaskVars& v, const LossWeights& lambda) {
  const LossCoefficients c = loss_coefficients(values(t, v), lambda);
  std::vector<ad::Var> terms;
  std::vector<double> coefs;
  auto push = [&](const std::optional<ad::Var>& x, double coef) {
    if (!x) return;
    terms.push_back(*x);
    coefs.push_back(coef);
  };
  push(v.det, c.det);
  push(v.map, c.map);
  push(v.occ, c.occ);
  push(v.mot, c.mot);
  push(v.plan, c.plan);
  if (terms.empty()) return t.constant(Eigen::MatrixXd::Zero(1, 1));
  return ad::linear_combination(t, terms, coefs);
}

TaskLosses toy_heads(const DenseBEV& bev, const HeadParams& p, const TaskTargets& targets) {
  ad::Tape t(false);
  return values(t, toy_heads(t, t.constant(bev.data), p, targets));
}

}  // namespace unilion
