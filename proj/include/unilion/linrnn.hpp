#pragma once

// Linear group RNN operators: a gated selective scan and an RWKV-style WKV
// scan, each applied independently to every group of a GroupLayout.

#include "unilion/parallel.hpp"
#include "unilion/partition.hpp"
#include "unilion/voxel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace unilion {

// Per-slot validity flags for a scan sequence; an empty mask means every
// slot is valid. Masked slots leave the state untouched and emit zeros.
using Mask = std::vector<std::uint8_t>;

// Multiply-add counter used by the complexity benchmark.
struct OpCounter {
  std::uint64_t macs = 0;
};

enum class ScanKind { Selective, WKV };

// h_t = g_t * h_{t-1} + (1 - g_t) * u_t,  y_t = h_t * silu(Wo x_t + bo)
// with g_t = sigmoid(Wg x_t + bg) and u_t = Wu x_t + bu.
template <typename Scalar>
struct SelectiveScanParams {
  MatrixX<Scalar> Wg, Wu, Wo;
  VectorX<Scalar> bg, bu, bo;

  Index channels() const { return Wg.rows(); }

  static SelectiveScanParams zeros(Index c) {
    return {MatrixX<Scalar>::Zero(c, c), MatrixX<Scalar>::Zero(c, c),
            MatrixX<Scalar>::Zero(c, c), VectorX<Scalar>::Zero(c),
            VectorX<Scalar>::Zero(c),    VectorX<Scalar>::Zero(c)};
  }

  void validate(Index c) const {
    const bool square = Wg.rows() == c && Wg.cols() == c && Wu.rows() == c && Wu.cols() == c &&
                        Wo.rows() == c && Wo.cols() == c;
    const bool bias = bg.size() == c && bu.size() == c && bo.size() == c;
    require_dims(square && bias, "selective scan: parameters do not match channel count");
  }

  template <typename Other>
  SelectiveScanParams<Other> cast() const {
    return {Wg.template cast<Other>(), Wu.template cast<Other>(), Wo.template cast<Other>(),
            bg.template cast<Other>(), bu.template cast<Other>(), bo.template cast<Other>()};
  }
};

// a_t = e^-w a_{t-1} + e^k_t v_t,  b_t = e^-w b_{t-1} + e^k_t
// y_t = sigmoid(r_t) (e^-w a_{t-1} + e^(u+k_t) v_t) / (e^-w b_{t-1} + e^(u+k_t) + eps)
template <typename Scalar>
struct WKVScanParams {
  MatrixX<Scalar> Wr, Wk, Wv;
  VectorX<Scalar> w;  // per-channel decay, >= 0
  VectorX<Scalar> u;  // per-channel first-token bonus

  Index channels() const { return Wr.rows(); }

  static WKVScanParams zeros(Index c) {
    return {MatrixX<Scalar>::Zero(c, c), MatrixX<Scalar>::Zero(c, c),
            MatrixX<Scalar>::Zero(c, c), VectorX<Scalar>::Zero(c), VectorX<Scalar>::Zero(c)};
  }

  void validate(Index c) const {
    const bool square = Wr.rows() == c && Wr.cols() == c && Wk.rows() == c && Wk.cols() == c &&
                        Wv.rows() == c && Wv.cols() == c;
    require_dims(square && w.size() == c && u.size() == c,
                 "wkv scan: parameters do not match channel count");
    if ((w.array() < Scalar(0)).any()) throw std::invalid_argument("wkv scan: decay w must be >= 0");
  }

  template <typename Other>
  WKVScanParams<Other> cast() const {
    return {Wr.template cast<Other>(), Wk.template cast<Other>(), Wv.template cast<Other>(),
            w.template cast<Other>(), u.template cast<Other>()};
  }
};

template <typename Scalar>
struct ScanOperator {
  ScanKind kind = ScanKind::Selective;
  SelectiveScanParams<Scalar> selective;
  WKVScanParams<Scalar> wkv;

  Index channels() const {
    return kind == ScanKind::Selective ? selective.channels() : wkv.channels();
  }
};

inline constexpr double kWkvEpsilon = 1e-8;

namespace detail {

inline bool slot_valid(std::span<const std::uint8_t> mask, Index t) {
  return mask.empty() || mask[static_cast<std::size_t>(t)] != 0;
}

// out = W x + b for one token, accumulated in ascending input-channel order
// starting from the bias.
template <typename Scalar>
void project_token(const MatrixX<Scalar>& W, const VectorX<Scalar>* b, const Scalar* x,
                   Scalar* out) {
  const Index cin = W.cols();
  const Index cout = W.rows();
  for (Index j = 0; j < cout; ++j) out[j] = b != nullptr ? (*b)[j] : Scalar(0);
  for (Index k = 0; k < cin; ++k) {
    const Scalar xk = x[k];
    const Scalar* wk = W.col(k).data();
    for (Index j = 0; j < cout; ++j) out[j] += wk[j] * xk;
  }
}

// Column t of the result is W x_t + b. Masked columns are left at zero.
template <typename Scalar>
MatrixX<Scalar> project_columns(const MatrixX<Scalar>& x, const MatrixX<Scalar>& W,
                                const VectorX<Scalar>* b, std::span<const std::uint8_t> mask) {
  const Index T = x.rows();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(W.rows(), T);
  const MatrixX<Scalar> xt = x.transpose();  // contiguous per token
  for (Index t = 0; t < T; ++t)
    if (slot_valid(mask, t)) project_token(W, b, xt.col(t).data(), out.col(t).data());
  return out;
}

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

template <typename Scalar>
Scalar silu(Scalar v) {
  return v * sigmoid(v);
}

template <typename Scalar>
void check_scan_inputs(const MatrixX<Scalar>& x, Index channels,
                       std::span<const std::uint8_t> mask) {
  require_dims(x.cols() == channels, "scan: input channels do not match parameters");
  require_dims(mask.empty() || static_cast<Index>(mask.size()) == x.rows(),
               "scan: mask length does not match sequence length");
}

template <typename Scalar>
Index count_valid(Index T, std::span<const std::uint8_t> mask) {
  if (mask.empty()) return T;
  Index n = 0;
  for (auto m : mask) n += m != 0;
  return n;
}

inline constexpr Index kScanBlock = 64;

// Visits rows [begin, end) of x in order as contiguous C-vectors. fn(t, xrow,
// yrow) fills the output row, which lands in row t of y (masked rows are
// skipped and stay zero). Only a block of rows is held transposed at a time,
// so the working set does not grow with T.
template <typename Scalar, typename Fn>
void stream_rows(const MatrixX<Scalar>& x, Index begin, Index end,
                 std::span<const std::uint8_t> mask, MatrixX<Scalar>* y, Fn&& fn) {
  const Index cin = x.cols();
  const Index cout = y != nullptr ? y->cols() : 0;
  MatrixX<Scalar> xb(cin, kScanBlock), yb(std::max<Index>(cout, 1), kScanBlock);
  for (Index t0 = begin; t0 < end; t0 += kScanBlock) {
    const Index len = std::min(kScanBlock, end - t0);
    for (Index c = 0; c < cin; ++c) {
      const Scalar* src = x.col(c).data() + t0;
      for (Index i = 0; i < len; ++i) xb(c, i) = src[i];
    }
    yb.setZero();
    for (Index i = 0; i < len; ++i)
      if (slot_valid(mask, t0 + i)) fn(t0 + i, xb.col(i).data(), yb.col(i).data());
    if (y == nullptr) continue;
    for (Index c = 0; c < cout; ++c) {
      Scalar* dst = y->col(c).data() + t0;
      for (Index i = 0; i < len; ++i) dst[i] = yb(c, i);
    }
  }
}

// Per-token gate g = sigmoid(Wg x + bg), candidate u = Wu x + bu and output
// gate o = silu(Wo x + bo).
template <typename Scalar>
struct SelectiveStep {
  const SelectiveScanParams<Scalar>& p;
  VectorX<Scalar> g, u, o;

  explicit SelectiveStep(const SelectiveScanParams<Scalar>& params)
      : p(params), g(params.channels()), u(params.channels()), o(params.channels()) {}

  void gate_update(const Scalar* x) {
    project_token(p.Wg, &p.bg, x, g.data());
    project_token(p.Wu, &p.bu, x, u.data());
    for (Index c = 0; c < g.size(); ++c) g[c] = sigmoid(g[c]);
  }
  void output_gate(const Scalar* x) {
    project_token(p.Wo, &p.bo, x, o.data());
    for (Index c = 0; c < o.size(); ++c) o[c] = silu(o[c]);
  }
};

}  // namespace detail

// Multiply-adds charged per valid slot.
inline std::uint64_t selective_scan_macs_per_step(Index c) {
  return static_cast<std::uint64_t>(3 * c * c + 3 * c);
}
// the replay recomputes the gate and candidate projections (2 C^2) and the
// chunk reduction adds 2 C
inline std::uint64_t selective_scan_chunked_macs_per_step(Index c) {
  return selective_scan_macs_per_step(c) + static_cast<std::uint64_t>(2 * c * c + 2 * c);
}
inline std::uint64_t wkv_scan_macs_per_step(Index c) {
  return static_cast<std::uint64_t>(3 * c * c + 12 * c);
}

// Reference sequential scan over one sequence (T x C).
template <typename Scalar>
MatrixX<Scalar> selective_scan_seq(const MatrixX<Scalar>& x, const SelectiveScanParams<Scalar>& p,
                                   std::span<const std::uint8_t> mask = {},
                                   OpCounter* counter = nullptr) {
  const Index C = p.channels();
  p.validate(C);
  detail::check_scan_inputs(x, C, mask);
  const Index T = x.rows();
  MatrixX<Scalar> y = MatrixX<Scalar>::Zero(T, C);
  VectorX<Scalar> h = VectorX<Scalar>::Zero(C);
  detail::SelectiveStep<Scalar> step(p);
  detail::stream_rows(x, 0, T, mask, &y, [&](Index, const Scalar* xr, Scalar* yr) {
    step.gate_update(xr);
    step.output_gate(xr);
    for (Index c = 0; c < C; ++c) {
      h[c] = step.g[c] * h[c] + (Scalar(1) - step.g[c]) * step.u[c];
      yr[c] = h[c] * step.o[c];
    }
  });
  if (counter != nullptr)
    counter->macs += selective_scan_macs_per_step(C) *
                     static_cast<std::uint64_t>(detail::count_valid<Scalar>(T, mask));
  return y;
}

// Same recurrence evaluated chunk-wise: each chunk is first reduced to one
// affine map h -> A h + B through (a1,b1)o(a2,b2) = (a1 a2, a2 b1 + b2), the
// chunk carries are propagated, and each chunk is then replayed from its
// carry-in. Chunks are independent in the first and last pass. Gates are
// recomputed in the replay instead of being stored for the whole sequence.
template <typename Scalar>
MatrixX<Scalar> selective_scan_chunked(const MatrixX<Scalar>& x,
                                       const SelectiveScanParams<Scalar>& p,
                                       std::span<const std::uint8_t> mask, Index chunk,
                                       OpCounter* counter = nullptr) {
  require_dims(chunk >= 1, "selective_scan_chunked: chunk must be >= 1");
  const Index C = p.channels();
  p.validate(C);
  detail::check_scan_inputs(x, C, mask);
  const Index T = x.rows();
  const Index chunks = (T + chunk - 1) / chunk;

  MatrixX<Scalar> A = MatrixX<Scalar>::Ones(C, chunks);
  MatrixX<Scalar> B = MatrixX<Scalar>::Zero(C, chunks);
  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t ci) {
    const Index k = static_cast<Index>(ci);
    detail::SelectiveStep<Scalar> step(p);
    detail::stream_rows<Scalar>(x, k * chunk, std::min(T, (k + 1) * chunk), mask, nullptr,
                                [&](Index, const Scalar* xr, Scalar*) {
                                  step.gate_update(xr);
                                  for (Index c = 0; c < C; ++c) {
                                    const Scalar a = step.g[c];
                                    const Scalar b = (Scalar(1) - a) * step.u[c];
                                    A(c, k) = A(c, k) * a;
                                    B(c, k) = a * B(c, k) + b;
                                  }
                                });
  });

  MatrixX<Scalar> carry(C, chunks);
  VectorX<Scalar> h = VectorX<Scalar>::Zero(C);
  for (Index k = 0; k < chunks; ++k) {
    carry.col(k) = h;
    for (Index c = 0; c < C; ++c) h[c] = A(c, k) * h[c] + B(c, k);
  }

  MatrixX<Scalar> y = MatrixX<Scalar>::Zero(T, C);
  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t ci) {
    const Index k = static_cast<Index>(ci);
    detail::SelectiveStep<Scalar> step(p);
    VectorX<Scalar> state = carry.col(k);
    detail::stream_rows<Scalar>(x, k * chunk, std::min(T, (k + 1) * chunk), mask, &y,
                                [&](Index, const Scalar* xr, Scalar* yr) {
                                  step.gate_update(xr);
                                  step.output_gate(xr);
                                  for (Index c = 0; c < C; ++c) {
                                    state[c] = step.g[c] * state[c] +
                                               (Scalar(1) - step.g[c]) * step.u[c];
                                    yr[c] = state[c] * step.o[c];
                                  }
                                });
  });

  if (counter != nullptr) {
    const auto valid = static_cast<std::uint64_t>(detail::count_valid<Scalar>(T, mask));
    counter->macs += selective_scan_chunked_macs_per_step(C) * valid +
                     2 * static_cast<std::uint64_t>(C) * static_cast<std::uint64_t>(chunks);
  }
  return y;
}

// WKV scan in max-shifted log space: the state is kept as (a', b', p) with
// a = a' e^p and b = b' e^p so no exponential ever exceeds 1.
template <typename Scalar>
MatrixX<Scalar> wkv_scan(const MatrixX<Scalar>& x, const WKVScanParams<Scalar>& p,
                         std::span<const std::uint8_t> mask = {}, OpCounter* counter = nullptr) {
  const Index C = p.channels();
  p.validate(C);
  detail::check_scan_inputs(x, C, mask);
  const Index T = x.rows();
  const Scalar eps = static_cast<Scalar>(kWkvEpsilon);

  MatrixX<Scalar> y = MatrixX<Scalar>::Zero(T, C);
  VectorX<Scalar> a = VectorX<Scalar>::Zero(C), b = VectorX<Scalar>::Zero(C);
  VectorX<Scalar> shift = VectorX<Scalar>::Constant(C, -std::numeric_limits<Scalar>::infinity());
  VectorX<Scalar> r(C), k(C), v(C);
  detail::stream_rows(x, 0, T, mask, &y, [&](Index, const Scalar* xr, Scalar* yr) {
    detail::project_token<Scalar>(p.Wr, nullptr, xr, r.data());
    detail::project_token<Scalar>(p.Wk, nullptr, xr, k.data());
    detail::project_token<Scalar>(p.Wv, nullptr, xr, v.data());
    for (Index c = 0; c < C; ++c) {
      const Scalar kt = k[c];
      const Scalar vt = v[c];
      const Scalar decayed = shift[c] - p.w[c];

      const Scalar bonus = p.u[c] + kt;
      const Scalar q = std::max(decayed, bonus);
      const Scalar e1 = std::exp(decayed - q);
      const Scalar e2 = std::exp(bonus - q);
      const Scalar num = e1 * a[c] + e2 * vt;
      const Scalar den = e1 * b[c] + e2 + eps * std::exp(-q);
      yr[c] = detail::sigmoid(r[c]) * num / den;

      const Scalar q2 = std::max(decayed, kt);
      const Scalar f1 = std::exp(decayed - q2);
      const Scalar f2 = std::exp(kt - q2);
      a[c] = f1 * a[c] + f2 * vt;
      b[c] = f1 * b[c] + f2;
      shift[c] = q2;
    }
  });
  if (counter != nullptr)
    counter->macs += wkv_scan_macs_per_step(C) *
                     static_cast<std::uint64_t>(detail::count_valid<Scalar>(T, mask));
  return y;
}

template <typename Scalar>
MatrixX<Scalar> run_scan(const MatrixX<Scalar>& x, const ScanOperator<Scalar>& op,
                         std::span<const std::uint8_t> mask, OpCounter* counter = nullptr) {
  return op.kind == ScanKind::Selective ? selective_scan_seq(x, op.selective, mask, counter)
                                        : wkv_scan(x, op.wkv, mask, counter);
}

// Padded G x C sequence for group g of the layout plus its validity mask.
template <typename Scalar>
std::pair<MatrixX<Scalar>, Mask> gather_group(const MatrixX<Scalar>& features,
                                              const GroupLayout& layout, Index g) {
  const auto rows = layout.group(g);
  MatrixX<Scalar> seq = MatrixX<Scalar>::Zero(layout.group_size, features.cols());
  Mask mask(static_cast<std::size_t>(layout.group_size), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    seq.row(static_cast<Index>(i)) = features.row(rows[i]);
    mask[i] = 1;
  }
  return {std::move(seq), std::move(mask)};
}

// Runs the chosen scan forward over every group and scatters the outputs back
// through the inverse permutation. Groups write disjoint rows.
template <typename Scalar>
MatrixX<Scalar> group_scan(const MatrixX<Scalar>& features, const GroupLayout& layout,
                           const ScanOperator<Scalar>& op, OpCounter* counter = nullptr) {
  require_dims(layout.length() == features.rows(), "group_scan: layout/set length mismatch");
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(features.rows(), op.channels());
  std::vector<OpCounter> counts(static_cast<std::size_t>(layout.group_count));
  parallel_for(static_cast<std::size_t>(layout.group_count), [&](std::size_t gi) {
    const Index g = static_cast<Index>(gi);
    auto [seq, mask] = gather_group(features, layout, g);
    const MatrixX<Scalar> y = run_scan(seq, op, mask, &counts[gi]);
    const auto rows = layout.group(g);
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) = y.row(static_cast<Index>(i));
  });
  if (counter != nullptr)
    for (const auto& c : counts) counter->macs += c.macs;
  return out;
}

template <typename Scalar>
SparseFeatureSet<Scalar> group_scan(const SparseFeatureSet<Scalar>& set, const GroupLayout& layout,
                                    const ScanOperator<Scalar>& op, OpCounter* counter = nullptr) {
  return {set.coords, group_scan(set.features, layout, op, counter), set.grid};
}

// Full softmax self-attention over the raw sequence, O(T^2 C). Serves as the
// quadratic baseline of the complexity benchmark.
template <typename Scalar>
MatrixX<Scalar> quadratic_attention(const MatrixX<Scalar>& x, OpCounter* counter = nullptr) {
  const Index T = x.rows();
  const Index C = x.cols();
  const MatrixX<Scalar> xt = x.transpose();
  MatrixX<Scalar> yt = MatrixX<Scalar>::Zero(C, T);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(std::max<Index>(C, 1)));
  std::vector<Scalar> logits(static_cast<std::size_t>(T));
  for (Index t = 0; t < T; ++t) {
    Scalar best = -std::numeric_limits<Scalar>::infinity();
    for (Index s = 0; s < T; ++s) {
      Scalar dot = 0;
      for (Index c = 0; c < C; ++c) dot += xt(c, t) * xt(c, s);
      logits[static_cast<std::size_t>(s)] = dot * scale;
      best = std::max(best, logits[static_cast<std::size_t>(s)]);
    }
    Scalar total = 0;
    for (Index s = 0; s < T; ++s) {
      const Scalar e = std::exp(logits[static_cast<std::size_t>(s)] - best);
      logits[static_cast<std::size_t>(s)] = e;
      total += e;
    }
    for (Index s = 0; s < T; ++s) {
      const Scalar wgt = logits[static_cast<std::size_t>(s)] / total;
      for (Index c = 0; c < C; ++c) yt(c, t) += wgt * xt(c, s);
    }
  }
  if (counter != nullptr)
    counter->macs += 2 * static_cast<std::uint64_t>(T) * static_cast<std::uint64_t>(T) *
                     static_cast<std::uint64_t>(C);
  return yt.transpose();
}

}  // namespace unilion
