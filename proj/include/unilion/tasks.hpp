#pragma once

// Dynamic multi-task loss balancing and 1x1 toy heads on the shared BEV.

#include "unilion/autodiff.hpp"
#include "unilion/backbone.hpp"
#include "unilion/rng.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace unilion {

inline constexpr double kTaskWeightEpsilon = 1e-5;

struct TaskLosses {
  std::optional<double> det, map, occ, mot, plan;

  nlohmann::json to_json() const;
};

struct LossWeights {
  double det = 1.0;
  double map = 0.5;
  double occ = 1.0;
  double mot = 1.0;
  double plan = 1.0;
};

// w = l_det / (l_task + 1e-5)
double dynamic_weight(double l_det, double l_task);

// lambda1 l_det + lambda2 w_map l_map + lambda3 w_occ l_occ + lambda4 l_mot +
// lambda5 l_plan, with absent tasks contributing nothing. Throws
// std::invalid_argument when map or occ is present without det, or when a
// present loss is negative or not finite.
double total_loss(const TaskLosses& losses, const LossWeights& lambda = {});

// Per-term coefficients multiplying each present loss in total_loss, with the
// dynamic weights evaluated (and thereby detached) at the given values.
struct LossCoefficients {
  double det = 0, map = 0, occ = 0, mot = 0, plan = 0;
};
LossCoefficients loss_coefficients(const TaskLosses& losses, const LossWeights& lambda = {});

struct HeadParams {
  Eigen::MatrixXd W_det, W_occ, W_map, W_mot, W_plan;  // out x C
  Eigen::VectorXd b_det, b_occ, b_map, b_mot, b_plan;

  static HeadParams init(Index channels, Index map_classes, Rng& rng);
  static HeadParams zeros(Index channels, Index map_classes);
};

std::vector<ad::ParamSlot> param_slots(HeadParams& p, const std::string& prefix = "heads");

// Targets over the (batches * H * W) BEV cells; unset members disable a head.
struct TaskTargets {
  std::optional<Eigen::MatrixXd> heatmap;    // cells x 1, values in [0, 1], peaks exactly 1
  std::optional<Eigen::MatrixXd> occupancy;  // cells x 1, 0/1
  std::optional<std::vector<int>> map_labels;
  std::optional<Eigen::MatrixXd> motion;     // cells x 2
  std::vector<std::uint8_t> motion_mask;     // cells; rows with a motion target
  std::optional<Eigen::MatrixXd> plan;       // 1 x 2
};

struct TaskVars {
  std::optional<ad::Var> det, map, occ, mot, plan;
};

TaskVars toy_heads(ad::Tape& t, ad::Var bev, const HeadParams& p, const TaskTargets& targets);
TaskLosses values(const ad::Tape& t, const TaskVars& v);
// Scalar node of total_loss with detached dynamic weights.
ad::Var total_loss(ad::Tape& t, const TaskVars& v, const LossWeights& lambda = {});

TaskLosses toy_heads(const DenseBEV& bev, const HeadParams& p, const TaskTargets& targets);

}  // namespace unilion
