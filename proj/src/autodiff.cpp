#include "unilion/autodiff.hpp"

#include "unilion/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace unilion::ad {

// --- tape -------------------------------------------------------------------

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<Index>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) { return leaf(std::move(value), false); }

Var Tape::param(const Eigen::MatrixXd& m) {
  if (auto it = params_.find(&m); it != params_.end()) return Var{it->second};
  const Var v = leaf(m, true);
  params_.emplace(&m, v.id);
  return v;
}

Var Tape::param(const Eigen::VectorXd& v) {
  if (auto it = params_.find(&v); it != params_.end()) return Var{it->second};
  const Var out = leaf(Matrix(v), true);
  params_.emplace(&v, out.id);
  return out;
}

Var Tape::record(Matrix value, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  if (record_) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<Index>(nodes_.size()) - 1};
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.has_grad) return n.grad;
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

Matrix Tape::grad_of(const void* key) const {
  const auto it = params_.find(key);
  if (it == params_.end()) throw std::out_of_range("Tape::grad_of: parameter not on tape");
  return grad(Var{it->second});
}

void Tape::backward(Var loss) {
  const Matrix& lv = value(loss);
  require_dims(lv.rows() == 1 && lv.cols() == 1, "backward: loss must be a 1x1 scalar");
  if (!record_) throw std::logic_error("backward: tape was not recording");
  accumulate(loss, Matrix::Ones(1, 1));
  for (Index i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

// --- elementwise and affine --------------------------------------------------

Var add(Tape& t, Var a, Var b) {
  require_dims(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
               "add: shape mismatch");
  return t.record(t.value(a) + t.value(b), [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.record(t.value(a) * s, [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, g * s); });
}

Var affine(Tape& t, Var x, Var W, Var b) {
  const Matrix& xv = t.value(x);
  const Matrix& Wv = t.value(W);
  const Matrix& bv = t.value(b);
  require_dims(xv.cols() == Wv.cols(), "affine: input channels do not match weight");
  require_dims(bv.rows() == Wv.rows() && bv.cols() == 1, "affine: bias size");
  Matrix out = xv * Wv.transpose();
  out.rowwise() += bv.col(0).transpose();
  return t.record(std::move(out), [x, W, b](Tape& tp, const Matrix& g) {
    tp.accumulate(x, g * tp.value(W));
    tp.accumulate(W, g.transpose() * tp.value(x));
    tp.accumulate(b, g.colwise().sum().transpose());
  });
}

namespace {

double gelu_grad(double v) {
  const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + v * pdf;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// log(1 + e^v) without overflow.
double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

}  // namespace

Var gelu(Tape& t, Var x) {
  return t.record(unilion::gelu(t.value(x)).eval(), [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x, g.cwiseProduct(tp.value(x).unaryExpr([](double v) { return gelu_grad(v); })));
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Matrix& gv = t.value(gamma);
  const Matrix& bv = t.value(beta);
  require_dims(gv.cols() == 1 && bv.cols() == 1, "layer_norm: gamma/beta must be vectors");
  Matrix out = unilion::layer_norm<double>(t.value(x), gv.col(0), bv.col(0), eps);
  return t.record(std::move(out), [x, gamma, beta, eps](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(x);
    const Eigen::VectorXd gam = tp.value(gamma).col(0);
    const Index C = xv.cols();
    Matrix dx(xv.rows(), C);
    Eigen::VectorXd dgamma = Eigen::VectorXd::Zero(C);
    Eigen::VectorXd dbeta = Eigen::VectorXd::Zero(C);
    for (Index i = 0; i < xv.rows(); ++i) {
      const double mean = xv.row(i).mean();
      const double var = (xv.row(i).array() - mean).square().mean();
      const double inv = 1.0 / std::sqrt(var + eps);
      const Eigen::RowVectorXd xhat = (xv.row(i).array() - mean) * inv;
      const Eigen::RowVectorXd dxhat = g.row(i).cwiseProduct(gam.transpose());
      const double m1 = dxhat.mean();
      const double m2 = dxhat.cwiseProduct(xhat).mean();
      dx.row(i) = inv * (dxhat.array() - m1 - xhat.array() * m2).matrix();
      dgamma += g.row(i).cwiseProduct(xhat).transpose();
      dbeta += g.row(i).transpose();
    }
    tp.accumulate(x, dx);
    tp.accumulate(gamma, dgamma);
    tp.accumulate(beta, dbeta);
  });
}

// --- structural -------------------------------------------------------------

Var gather_rows(Tape& t, Var x, std::vector<Index> index) {
  Matrix out = unilion::gather_rows<double>(t.value(x), index);
  return t.record(std::move(out), [x, index = std::move(index)](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(x);
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < index.size(); ++i)
      if (index[i] >= 0) dx.row(index[i]) += g.row(static_cast<Index>(i));
    tp.accumulate(x, dx);
  });
}

Var scatter_sum(Tape& t, Var x, std::vector<Index> target, Index rows) {
  const Matrix& xv = t.value(x);
  require_dims(static_cast<Index>(target.size()) == xv.rows(), "scatter_sum: target length");
  Matrix out = Matrix::Zero(rows, xv.cols());
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] < 0) continue;
    require_dims(target[i] < rows, "scatter_sum: target row out of range");
    out.row(target[i]) += xv.row(static_cast<Index>(i));
  }
  return t.record(std::move(out), [x, target = std::move(target)](Tape& tp, const Matrix& g) {
    tp.accumulate(x, unilion::gather_rows<double>(g, target));
  });
}

Var segment_sum(Tape& t, Var x, const IndexMap& map) {
  Matrix out = unilion::segment_sum<double>(t.value(x), map);
  return t.record(std::move(out), [x, parent = map.parent_of](Tape& tp, const Matrix& g) {
    tp.accumulate(x, unilion::gather_rows<double>(g, parent));
  });
}

Var segment_mean(Tape& t, Var x, const IndexMap& map) {
  Matrix out = unilion::segment_mean<double>(t.value(x), map);
  std::vector<double> inv_count(static_cast<std::size_t>(map.coarse_count()));
  for (Index p = 0; p < map.coarse_count(); ++p)
    inv_count[static_cast<std::size_t>(p)] = 1.0 / static_cast<double>(map.child_count(p));
  return t.record(std::move(out), [x, parent = map.parent_of, inv_count = std::move(inv_count)](
                                      Tape& tp, const Matrix& g) {
    Matrix dx = unilion::gather_rows<double>(g, parent);
    for (std::size_t i = 0; i < parent.size(); ++i)
      dx.row(static_cast<Index>(i)) *= inv_count[static_cast<std::size_t>(parent[i])];
    tp.accumulate(x, dx);
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  require_dims(!parts.empty(), "concat_rows: no inputs");
  const Index C = t.value(parts[0]).cols();
  Index rows = 0;
  for (Var p : parts) {
    require_dims(t.value(p).cols() == C || t.value(p).rows() == 0, "concat_rows: channel mismatch");
    rows += t.value(p).rows();
  }
  Matrix out(rows, C);
  std::vector<Index> offsets;
  Index r = 0;
  for (Var p : parts) {
    offsets.push_back(r);
    const Matrix& v = t.value(p);
    if (v.rows() > 0) out.middleRows(r, v.rows()) = v;
    r += v.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), [inputs = std::move(inputs), offsets = std::move(offsets)](
                                      Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const Index n = tp.value(inputs[i]).rows();
      if (n > 0) tp.accumulate(inputs[i], g.middleRows(offsets[i], n));
    }
  });
}

Var submanifold_conv3(Tape& t, Var x, const NeighborTable& table, Var weights, Var bias) {
  ConvKernel3<double> kernel{t.value(weights), t.value(bias).col(0)};
  Matrix out = unilion::submanifold_conv3<double>(t.value(x), table, kernel);
  return t.record(std::move(out), [x, weights, bias, table](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(x);
    const Matrix& W = tp.value(weights);
    const Index cin = xv.cols();
    const Index L = xv.rows();
    Matrix dx = Matrix::Zero(L, cin);
    Matrix dW = Matrix::Zero(W.rows(), W.cols());
    Matrix gathered(L, cin);
    for (int k = 0; k < kKernelVolume; ++k) {
      bool any = false;
      for (Index i = 0; i < L; ++i) {
        const Index n = table.rows[static_cast<std::size_t>(i)][k];
        if (n < 0) {
          gathered.row(i).setZero();
        } else {
          gathered.row(i) = xv.row(n);
          any = true;
        }
      }
      if (!any) continue;
      dW.middleRows(k * cin, cin) = gathered.transpose() * g;
      const Matrix dg = g * W.middleRows(k * cin, cin).transpose();
      for (Index i = 0; i < L; ++i) {
        const Index n = table.rows[static_cast<std::size_t>(i)][k];
        if (n >= 0) dx.row(n) += dg.row(i);
      }
    }
    tp.accumulate(x, dx);
    tp.accumulate(weights, dW);
    tp.accumulate(bias, g.colwise().sum().transpose());
  });
}

// --- scans ------------------------------------------------------------------

namespace {

struct SelectiveGrads {
  Matrix dx;
  Matrix dWg, dWu, dWo;
  Eigen::VectorXd dbg, dbu, dbo;
};

// Reverse pass through one padded group sequence.
void selective_backward(const Matrix& x, const Mask& mask, const SelectiveScanParams<double>& p,
                        const Matrix& dy, SelectiveGrads& acc) {
  const Index T = x.rows();
  const Index C = p.channels();
  const Matrix pre_g = detail::project_columns<double>(x, p.Wg, &p.bg, mask);
  const Matrix upd = detail::project_columns<double>(x, p.Wu, &p.bu, mask);
  const Matrix pre_o = detail::project_columns<double>(x, p.Wo, &p.bo, mask);

  Matrix gate(C, T), h(C, T), h_prev(C, T);
  Eigen::VectorXd state = Eigen::VectorXd::Zero(C);
  for (Index t = 0; t < T; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    for (Index c = 0; c < C; ++c) {
      const double g = detail::sigmoid(pre_g(c, t));
      gate(c, t) = g;
      h_prev(c, t) = state[c];
      state[c] = g * state[c] + (1.0 - g) * upd(c, t);
      h(c, t) = state[c];
    }
  }

  Matrix d_pre_g = Matrix::Zero(C, T), d_upd = Matrix::Zero(C, T), d_pre_o = Matrix::Zero(C, T);
  Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(C);
  for (Index t = T - 1; t >= 0; --t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    for (Index c = 0; c < C; ++c) {
      const double z = pre_o(c, t);
      const double sz = detail::sigmoid(z);
      const double silu = z * sz;
      const double dsilu = sz * (1.0 + z * (1.0 - sz));
      const double dyv = dy(t, c);
      const double dh = dh_next[c] + dyv * silu;
      d_pre_o(c, t) = dyv * h(c, t) * dsilu;
      const double g = gate(c, t);
      d_pre_g(c, t) = dh * (h_prev(c, t) - upd(c, t)) * g * (1.0 - g);
      d_upd(c, t) = dh * (1.0 - g);
      dh_next[c] = dh * g;
    }
  }

  acc.dx += d_pre_g.transpose() * p.Wg + d_upd.transpose() * p.Wu + d_pre_o.transpose() * p.Wo;
  acc.dWg += d_pre_g * x;
  acc.dWu += d_upd * x;
  acc.dWo += d_pre_o * x;
  acc.dbg += d_pre_g.rowwise().sum();
  acc.dbu += d_upd.rowwise().sum();
  acc.dbo += d_pre_o.rowwise().sum();
}

struct WkvGrads {
  Matrix dx;
  Matrix dWr, dWk, dWv;
  Eigen::VectorXd dw, du;
};

// Reverse pass of the max-shifted WKV recurrence. Adjoints of the state are
// carried in the same shifted units as the state itself, so every
// exponential evaluated here is at most 1.
void wkv_backward(const Matrix& x, const Mask& mask, const WKVScanParams<double>& p,
                  const Matrix& dy, WkvGrads& acc) {
  const Index T = x.rows();
  const Index C = p.channels();
  const Matrix r = detail::project_columns<double>(x, p.Wr, nullptr, mask);
  const Matrix k = detail::project_columns<double>(x, p.Wk, nullptr, mask);
  const Matrix v = detail::project_columns<double>(x, p.Wv, nullptr, mask);
  const double neg_inf = -std::numeric_limits<double>::infinity();

  Matrix dr = Matrix::Zero(C, T), dk = Matrix::Zero(C, T), dv = Matrix::Zero(C, T);
  std::vector<Index> steps;
  for (Index t = 0; t < T; ++t)
    if (mask[static_cast<std::size_t>(t)]) steps.push_back(t);
  const std::size_t S = steps.size();
  std::vector<double> a_prev(S), b_prev(S), e1(S), e2(S), den(S), z(S), f1(S), f2(S);

  for (Index c = 0; c < C; ++c) {
    const double w = p.w[c];
    const double u = p.u[c];
    double a = 0, b = 0, shift = neg_inf;
    for (std::size_t s = 0; s < S; ++s) {
      const Index t = steps[s];
      const double kt = k(c, t), vt = v(c, t);
      const double decayed = shift - w;
      const double bonus = u + kt;
      const double q = std::max(decayed, bonus);
      a_prev[s] = a;
      b_prev[s] = b;
      e1[s] = std::exp(decayed - q);
      e2[s] = std::exp(bonus - q);
      den[s] = e1[s] * b + e2[s] + kWkvEpsilon * std::exp(-q);
      z[s] = (e1[s] * a + e2[s] * vt) / den[s];
      const double q2 = std::max(decayed, kt);
      f1[s] = std::exp(decayed - q2);
      f2[s] = std::exp(kt - q2);
      a = f1[s] * a + f2[s] * vt;
      b = f1[s] * b + f2[s];
      shift = q2;
    }

    double adj_a = 0, adj_b = 0, dw = 0, du = 0;
    for (std::size_t s = S; s-- > 0;) {
      const Index t = steps[s];
      const double vt = v(c, t);
      const double sr = detail::sigmoid(r(c, t));
      const double dz = dy(t, c) * sr;
      dr(c, t) = dy(t, c) * z[s] * sr * (1.0 - sr);

      // Contribution of the output at step s.
      const double inv = 1.0 / den[s];
      const double bonus_grad = dz * e2[s] * inv * (vt - z[s]);
      double dvt = dz * e2[s] * inv;
      double dkt = bonus_grad;
      du += bonus_grad;
      dw -= dz * e1[s] * inv * (a_prev[s] - b_prev[s] * z[s]);
      double prev_a = dz * e1[s] * inv;
      double prev_b = -dz * z[s] * e1[s] * inv;

      // Contribution of the state update at step s.
      dvt += adj_a * f2[s];
      dkt += f2[s] * (adj_a * vt + adj_b);
      dw -= f1[s] * (adj_a * a_prev[s] + adj_b * b_prev[s]);
      prev_a += f1[s] * adj_a;
      prev_b += f1[s] * adj_b;

      dv(c, t) = dvt;
      dk(c, t) = dkt;
      adj_a = prev_a;
      adj_b = prev_b;
    }
    acc.dw[c] += dw;
    acc.du[c] += du;
  }

  acc.dx += dr.transpose() * p.Wr + dk.transpose() * p.Wk + dv.transpose() * p.Wv;
  acc.dWr += dr * x;
  acc.dWk += dk * x;
  acc.dWv += dv * x;
}

}  // namespace

Var group_scan(Tape& t, Var x, const GroupLayout& layout, const ScanOperator<double>& op) {
  const Index C = op.channels();
  Matrix out = unilion::group_scan<double>(t.value(x), layout, op);
  if (op.kind == ScanKind::Selective) {
    const auto& p = op.selective;
    const Var vWg = t.param(p.Wg), vWu = t.param(p.Wu), vWo = t.param(p.Wo);
    const Var vbg = t.param(p.bg), vbu = t.param(p.bu), vbo = t.param(p.bo);
    return t.record(std::move(out), [x, layout, p, C, vWg, vWu, vWo, vbg, vbu, vbo](
                                        Tape& tp, const Matrix& g) {
      const Matrix& xv = tp.value(x);
      SelectiveGrads acc{Matrix::Zero(layout.group_size, C), Matrix::Zero(C, C),
                         Matrix::Zero(C, C),                  Matrix::Zero(C, C),
                         Eigen::VectorXd::Zero(C),            Eigen::VectorXd::Zero(C),
                         Eigen::VectorXd::Zero(C)};
      Matrix dx = Matrix::Zero(xv.rows(), C);
      for (Index grp = 0; grp < layout.group_count; ++grp) {
        auto [seq, mask] = gather_group<double>(xv, layout, grp);
        const auto rows = layout.group(grp);
        Matrix dy = Matrix::Zero(layout.group_size, C);
        for (std::size_t i = 0; i < rows.size(); ++i) dy.row(static_cast<Index>(i)) = g.row(rows[i]);
        acc.dx.setZero();
        selective_backward(seq, mask, p, dy, acc);
        for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += acc.dx.row(static_cast<Index>(i));
      }
      tp.accumulate(x, dx);
      tp.accumulate(vWg, acc.dWg);
      tp.accumulate(vWu, acc.dWu);
      tp.accumulate(vWo, acc.dWo);
      tp.accumulate(vbg, acc.dbg);
      tp.accumulate(vbu, acc.dbu);
      tp.accumulate(vbo, acc.dbo);
    });
  }
  const auto& p = op.wkv;
  const Var vWr = t.param(p.Wr), vWk = t.param(p.Wk), vWv = t.param(p.Wv);
  const Var vw = t.param(p.w), vu = t.param(p.u);
  return t.record(std::move(out), [x, layout, p, C, vWr, vWk, vWv, vw, vu](Tape& tp,
                                                                           const Matrix& g) {
    const Matrix& xv = tp.value(x);
    WkvGrads acc{Matrix::Zero(layout.group_size, C), Matrix::Zero(C, C), Matrix::Zero(C, C),
                 Matrix::Zero(C, C), Eigen::VectorXd::Zero(C), Eigen::VectorXd::Zero(C)};
    Matrix dx = Matrix::Zero(xv.rows(), C);
    for (Index grp = 0; grp < layout.group_count; ++grp) {
      auto [seq, mask] = gather_group<double>(xv, layout, grp);
      const auto rows = layout.group(grp);
      Matrix dy = Matrix::Zero(layout.group_size, C);
      for (std::size_t i = 0; i < rows.size(); ++i) dy.row(static_cast<Index>(i)) = g.row(rows[i]);
      acc.dx.setZero();
      wkv_backward(seq, mask, p, dy, acc);
      for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += acc.dx.row(static_cast<Index>(i));
    }
    tp.accumulate(x, dx);
    tp.accumulate(vWr, acc.dWr);
    tp.accumulate(vWk, acc.dWk);
    tp.accumulate(vWv, acc.dWv);
    tp.accumulate(vw, acc.dw);
    tp.accumulate(vu, acc.du);
  });
}

// --- reductions and losses --------------------------------------------------

Var mean_rows(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  const Index n = xv.rows();
  Matrix out = n > 0 ? Matrix(xv.colwise().mean()) : Matrix::Zero(1, xv.cols());
  return t.record(std::move(out), [x, n](Tape& tp, const Matrix& g) {
    if (n == 0) return;
    tp.accumulate(x, g.replicate(n, 1) / static_cast<double>(n));
  });
}

Var sum(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  return t.record(Matrix::Constant(1, 1, xv.sum()), [x](Tape& tp, const Matrix& g) {
    const Matrix& v = tp.value(x);
    tp.accumulate(x, Matrix::Constant(v.rows(), v.cols(), g(0, 0)));
  });
}

Var weighted_sum(Tape& t, Var x, const Matrix& w) {
  const Matrix& xv = t.value(x);
  require_dims(xv.rows() == w.rows() && xv.cols() == w.cols(), "weighted_sum: shape mismatch");
  return t.record(Matrix::Constant(1, 1, xv.cwiseProduct(w).sum()),
                  [x, w](Tape& tp, const Matrix& g) { tp.accumulate(x, w * g(0, 0)); });
}

Var linear_combination(Tape& t, std::span<const Var> scalars, std::span<const double> coefs) {
  require_dims(scalars.size() == coefs.size(), "linear_combination: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const Matrix& v = t.value(scalars[i]);
    require_dims(v.rows() == 1 && v.cols() == 1, "linear_combination: inputs must be 1x1");
    total += coefs[i] * v(0, 0);
  }
  std::vector<Var> in(scalars.begin(), scalars.end());
  std::vector<double> c(coefs.begin(), coefs.end());
  return t.record(Matrix::Constant(1, 1, total), [in = std::move(in), c = std::move(c)](
                                                      Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < in.size(); ++i) tp.accumulate(in[i], Matrix::Constant(1, 1, c[i] * g(0, 0)));
  });
}

Var focal_loss(Tape& t, Var logits, const Matrix& target) {
  const Matrix& z = t.value(logits);
  require_dims(z.rows() == target.rows() && z.cols() == target.cols(), "focal_loss: shape mismatch");
  double positives = 0.0;
  for (Index i = 0; i < target.size(); ++i) positives += target.data()[i] == 1.0 ? 1.0 : 0.0;
  const double norm = 1.0 / std::max(1.0, positives);

  double total = 0.0;
  for (Index i = 0; i < z.size(); ++i) {
    const double zi = z.data()[i];
    const double y = target.data()[i];
    const double p = sigmoid(zi);
    if (y == 1.0) {
      total += std::pow(1.0 - p, kFocalAlpha) * softplus(-zi);
    } else {
      total += std::pow(1.0 - y, kFocalBeta) * std::pow(p, kFocalAlpha) * softplus(zi);
    }
  }
  return t.record(Matrix::Constant(1, 1, total * norm), [logits, target, norm](Tape& tp,
                                                                              const Matrix& g) {
    const Matrix& zv = tp.value(logits);
    Matrix dz(zv.rows(), zv.cols());
    for (Index i = 0; i < zv.size(); ++i) {
      const double zi = zv.data()[i];
      const double y = target.data()[i];
      const double p = sigmoid(zi);
      double d;
      if (y == 1.0) {
        // l = -(1-p)^a log p
        d = kFocalAlpha * p * std::pow(1.0 - p, kFocalAlpha) * (-softplus(-zi)) -
            std::pow(1.0 - p, kFocalAlpha + 1.0);
      } else {
        // l = -(1-y)^b p^a log(1-p)
        d = std::pow(1.0 - y, kFocalBeta) *
            (kFocalAlpha * std::pow(p, kFocalAlpha) * (1.0 - p) * softplus(zi) +
             std::pow(p, kFocalAlpha + 1.0));
      }
      dz.data()[i] = d * norm * g(0, 0);
    }
    tp.accumulate(logits, dz);
  });
}

Var bce_with_logits(Tape& t, Var logits, const Matrix& target) {
  const Matrix& z = t.value(logits);
  require_dims(z.rows() == target.rows() && z.cols() == target.cols(), "bce: shape mismatch");
  const double n = static_cast<double>(std::max<Index>(1, z.size()));
  double total = 0.0;
  for (Index i = 0; i < z.size(); ++i) total += softplus(z.data()[i]) - target.data()[i] * z.data()[i];
  return t.record(Matrix::Constant(1, 1, total / n), [logits, target, n](Tape& tp, const Matrix& g) {
    const Matrix& zv = tp.value(logits);
    Matrix dz = zv.unaryExpr([](double v) { return sigmoid(v); }) - target;
    tp.accumulate(logits, dz * (g(0, 0) / n));
  });
}

Var softmax_cross_entropy(Tape& t, Var logits, std::vector<int> labels) {
  const Matrix& z = t.value(logits);
  require_dims(static_cast<Index>(labels.size()) == z.rows(), "cross_entropy: label count");
  const double n = static_cast<double>(std::max<Index>(1, z.rows()));
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require_dims(y >= 0 && y < z.cols(), "cross_entropy: label out of range");
    const double m = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - m).exp().matrix();
    const double s = e.sum();
    probs.row(i) = e / s;
    total += m + std::log(s) - z(i, y);
  }
  return t.record(Matrix::Constant(1, 1, total / n), [logits, labels = std::move(labels),
                                                      probs = std::move(probs), n](
                                                         Tape& tp, const Matrix& g) {
    Matrix dz = probs;
    for (Index i = 0; i < dz.rows(); ++i) dz(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    tp.accumulate(logits, dz * (g(0, 0) / n));
  });
}

Var smooth_l1(Tape& t, Var pred, const Matrix& target, std::vector<std::uint8_t> row_mask) {
  const Matrix& pv = t.value(pred);
  require_dims(pv.rows() == target.rows() && pv.cols() == target.cols(), "smooth_l1: shape mismatch");
  require_dims(static_cast<Index>(row_mask.size()) == pv.rows(), "smooth_l1: mask length");
  Index active = 0;
  for (auto m : row_mask) active += m != 0;
  const double n = static_cast<double>(std::max<Index>(1, active * pv.cols()));
  double total = 0.0;
  for (Index i = 0; i < pv.rows(); ++i) {
    if (!row_mask[static_cast<std::size_t>(i)]) continue;
    for (Index c = 0; c < pv.cols(); ++c) {
      const double d = pv(i, c) - target(i, c);
      total += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
    }
  }
  return t.record(Matrix::Constant(1, 1, total / n), [pred, target, row_mask = std::move(row_mask),
                                                      n](Tape& tp, const Matrix& g) {
    const Matrix& p = tp.value(pred);
    Matrix d = Matrix::Zero(p.rows(), p.cols());
    for (Index i = 0; i < p.rows(); ++i) {
      if (!row_mask[static_cast<std::size_t>(i)]) continue;
      for (Index c = 0; c < p.cols(); ++c) {
        const double diff = p(i, c) - target(i, c);
        d(i, c) = std::abs(diff) < 1.0 ? diff : (diff > 0 ? 1.0 : -1.0);
      }
    }
    tp.accumulate(pred, d * (g(0, 0) / n));
  });
}

// --- finite differences -----------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double GradientReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

nlohmann::json GradientReport::to_json() const {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : entries)
    params.push_back({{"name", e.name}, {"checked", e.checked}, {"max_rel_error", e.max_rel_error}});
  return {{"eps", eps}, {"directions", directions}, {"max_rel_error", max_rel_error()},
          {"params", std::move(params)}};
}

GradientReport fd_check(const std::function<double()>& loss, std::span<const ParamSlot> params,
                        std::span<const Eigen::VectorXd> analytic, const FdOptions& options) {
  if (!(options.eps > 0.0)) throw std::invalid_argument("fd_check: eps must be positive");
  require_dims(params.size() == analytic.size(), "fd_check: one analytic gradient per slot");
  for (std::size_t i = 0; i < params.size(); ++i)
    require_dims(analytic[i].size() == params[i].size, "fd_check: gradient size for " + params[i].name);

  GradientReport report;
  report.eps = options.eps;
  report.directions = options.directions;
  const double eps = options.eps;

  if (options.directions == 0) {
    for (std::size_t s = 0; s < params.size(); ++s) {
      GradientEntry entry{params[s].name, params[s].size, 0.0};
      for (Index i = 0; i < params[s].size; ++i) {
        double& value = params[s].data[i];
        const double original = value;
        value = original + eps;
        const double up = loss();
        value = original - eps;
        const double down = loss();
        value = original;
        const double numeric = (up - down) / (2.0 * eps);
        entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[s][i], numeric));
      }
      report.entries.push_back(std::move(entry));
    }
    return report;
  }

  Index total = 0;
  for (const auto& p : params) total += p.size;
  std::vector<double> original;
  original.reserve(static_cast<std::size_t>(total));
  for (const auto& p : params)
    for (Index i = 0; i < p.size; ++i) original.push_back(p.data[i]);

  auto apply = [&](const Eigen::VectorXd& dir, double step) {
    Index k = 0;
    for (const auto& p : params)
      for (Index i = 0; i < p.size; ++i, ++k) p.data[i] = original[static_cast<std::size_t>(k)] + step * dir[k];
  };
  auto restore = [&] {
    Index k = 0;
    for (const auto& p : params)
      for (Index i = 0; i < p.size; ++i, ++k) p.data[i] = original[static_cast<std::size_t>(k)];
  };

  Rng rng(options.seed);
  GradientEntry entry{"random-projection", options.directions, 0.0};
  for (Index d = 0; d < options.directions; ++d) {
    Eigen::VectorXd dir = rng.normal_vector(total);
    dir /= dir.norm();
    double directional = 0.0;
    Index k = 0;
    for (std::size_t s = 0; s < params.size(); ++s)
      for (Index i = 0; i < params[s].size; ++i, ++k) directional += analytic[s][i] * dir[k];
    apply(dir, eps);
    const double up = loss();
    apply(dir, -eps);
    const double down = loss();
    restore();
    const double numeric = (up - down) / (2.0 * eps);
    entry.max_rel_error = std::max(entry.max_rel_error, relative_error(directional, numeric));
  }
  report.entries.push_back(std::move(entry));
  return report;
}

GradientReport check_gradients(const std::function<Var(Tape&)>& build,
                               std::span<const ParamSlot> params, const FdOptions& options) {
  std::vector<Eigen::VectorXd> analytic;
  {
    Tape tape(true);
    const Var loss = build(tape);
    tape.backward(loss);
    for (const auto& p : params) {
      if (tape.has_param(p.key)) {
        const Matrix g = tape.grad_of(p.key);
        analytic.emplace_back(Eigen::Map<const Eigen::VectorXd>(g.data(), g.size()));
      } else {
        analytic.emplace_back(Eigen::VectorXd::Zero(p.size));
      }
    }
  }
  auto loss = [&] {
    Tape tape(false);
    return tape.value(build(tape))(0, 0);
  };
  return fd_check(loss, params, analytic, options);
}

}  // namespace unilion::ad
