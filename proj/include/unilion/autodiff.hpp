#pragma once

// Reverse-mode differentiation over the fixed operation set used by the
// backbone, task heads and losses, plus a central-difference verifier.
//
// A Tape records nodes in execution order; backward() walks them in reverse.
// Model parameters enter through Tape::param(), keyed by the address of the
// Eigen object that owns them, so gradients can be read back by address
// after backward(). A tape constructed with record = false only evaluates
// values and is what the plain (non-training) entry points use.

#include "unilion/linrnn.hpp"
#include "unilion/partition.hpp"
#include "unilion/sparse_ops.hpp"
#include "unilion/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace unilion::ad {

using Matrix = Eigen::MatrixXd;

struct Var {
  Index id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(Matrix value);
  Var param(const Eigen::MatrixXd& m);
  Var param(const Eigen::VectorXd& v);

  // Appends an op node. The backward closure receives the node's output
  // gradient and accumulates into its inputs; it is dropped when not recording.
  Var record(Matrix value, Backward backward);

  const Matrix& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  Matrix grad(Var v) const;
  Matrix grad_of(const void* key) const;
  bool has_param(const void* key) const { return params_.count(key) != 0; }

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  // Reverse sweep from a 1x1 loss node; throws DimensionMismatch otherwise.
  void backward(Var loss);

  Index size() const { return static_cast<Index>(nodes_.size()); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var leaf(Matrix value, bool requires_grad);

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, Index> params_;
};

// --- ops --------------------------------------------------------------------

Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
// x W^T + b^T for x: L x Cin, W: Cout x Cin, b: Cout x 1.
Var affine(Tape& t, Var x, Var W, Var b);
Var gelu(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = kLayerNormEpsilon);
// out.row(i) = x.row(index[i]) or zero when index[i] == -1.
Var gather_rows(Tape& t, Var x, std::vector<Index> index);
// out has `rows` rows; out.row(target[i]) += x.row(i), skipped when target[i] == -1.
Var scatter_sum(Tape& t, Var x, std::vector<Index> target, Index rows);
Var segment_sum(Tape& t, Var x, const IndexMap& map);
Var segment_mean(Tape& t, Var x, const IndexMap& map);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var submanifold_conv3(Tape& t, Var x, const NeighborTable& table, Var weights, Var bias);
// Group scan whose parameters are registered through Tape::param.
Var group_scan(Tape& t, Var x, const GroupLayout& layout, const ScanOperator<double>& op);
Var mean_rows(Tape& t, Var x);
Var sum(Tape& t, Var x);
// sum(x .* w) for a constant weight matrix of the same shape.
Var weighted_sum(Tape& t, Var x, const Matrix& w);
// sum_i coef[i] * scalar_i over 1x1 nodes.
Var linear_combination(Tape& t, std::span<const Var> scalars, std::span<const double> coefs);

// Penalty-reduced pixel focal loss on sigmoid(logits) (alpha = 2, beta = 4),
// normalized by the number of cells whose target equals 1 (at least 1).
Var focal_loss(Tape& t, Var logits, const Matrix& target);
// Mean binary cross-entropy on logits.
Var bce_with_logits(Tape& t, Var logits, const Matrix& target);
// Mean softmax cross-entropy; logits N x K, labels in [0, K).
Var softmax_cross_entropy(Tape& t, Var logits, std::vector<int> labels);
// Smooth-L1 (beta = 1) averaged over the entries of rows with mask != 0.
Var smooth_l1(Tape& t, Var pred, const Matrix& target, std::vector<std::uint8_t> row_mask);

inline constexpr double kFocalAlpha = 2.0;
inline constexpr double kFocalBeta = 4.0;

// --- finite-difference verification -------------------------------------------

// A contiguous block of parameter scalars that fd_check may perturb.
struct ParamSlot {
  std::string name;
  double* data = nullptr;
  Index size = 0;
  const void* key = nullptr;
};

inline ParamSlot slot(std::string name, Eigen::MatrixXd& m) {
  return {std::move(name), m.data(), m.size(), &m};
}
inline ParamSlot slot(std::string name, Eigen::VectorXd& v) {
  return {std::move(name), v.data(), v.size(), &v};
}

struct GradientEntry {
  std::string name;
  Index checked = 0;
  double max_rel_error = 0.0;
};

struct GradientReport {
  double eps = 0.0;
  Index directions = 0;  // 0 when every scalar was checked individually
  std::vector<GradientEntry> entries;

  double max_rel_error() const;
  nlohmann::json to_json() const;
};

struct FdOptions {
  double eps = 1e-5;
  // 0: central difference per scalar. Otherwise the number of random unit
  // directions over the concatenated parameter vector.
  Index directions = 0;
  std::uint64_t seed = 0x5eed;
};

// |a - f| / max(|a|, |f|, 1e-8)
double relative_error(double analytic, double numeric);

// Compares analytic gradients (one flattened vector per slot) against central
// differences of `loss`. Parameters are restored bit-exactly afterwards.
GradientReport fd_check(const std::function<double()>& loss, std::span<const ParamSlot> params,
                        std::span<const Eigen::VectorXd> analytic, const FdOptions& options);

// Builds the graph once with recording to get analytic gradients, then runs
// fd_check using value-only rebuilds of the same graph.
GradientReport check_gradients(const std::function<Var(Tape&)>& build,
                               std::span<const ParamSlot> params, const FdOptions& options);

}  // namespace unilion::ad
