#pragma once

// Gradient-check suite and the scan-vs-attention complexity benchmark.

#include "unilion/autodiff.hpp"
#include "unilion/config.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace unilion {

inline constexpr double kOpGradTolerance = 1e-6;
inline constexpr double kEndToEndGradTolerance = 1e-4;

struct NamedReport {
  std::string op;
  ad::GradientReport report;
};

struct GradientSuite {
  std::vector<NamedReport> ops;         // primitive tape ops, kOpGradTolerance
  std::vector<NamedReport> composites;  // layer, descriptor, block, ..., kEndToEndGradTolerance
};

// Central differences per scalar on small random instances of every
// differentiable op. Op outputs are reduced with a fixed random weighting.
GradientSuite op_gradient_suite(std::uint64_t seed, double eps = 1e-5);

// One-block backbone plus detection and occupancy heads on a synthetic frame,
// checked along random directions over every backbone and head parameter.
// The encoded input is held constant and the task terms use fixed
// coefficients, so the loss is a smooth function of the checked parameters.
ad::GradientReport end_to_end_gradcheck(const RunConfig& cfg, std::uint64_t seed);

struct GradcheckSummary {
  GradientSuite suite;
  ad::GradientReport end_to_end;

  double op_max_error() const;
  double composite_max_error() const;
  bool passed() const;
  nlohmann::json to_json() const;
};

GradcheckSummary run_gradcheck(const RunConfig& cfg, std::uint64_t seed);

// --- benchmark ----------------------------------------------------------------

struct BenchRow {
  std::string op;  // selective_seq, selective_chunked, wkv, attention
  Index T = 0;
  Index C = 0;
  std::string precision;
  double seconds = 0.0;  // median of the repeats, per call
  std::uint64_t macs = 0;
  double macs_per_token = 0.0;
};

struct BenchOptions {
  std::vector<Index> lengths{1024, 2048, 4096};
  Index channels = 32;
  int repeats = 15;
  Index chunk = 64;
  Precision precision = Precision::Double;
  double min_batch_seconds = 0.02;  // inner loop is repeated until it takes this long
};

std::vector<BenchRow> run_bench(const BenchOptions& options, std::uint64_t seed);

inline constexpr const char* kBenchCsvHeader =
    "operator,T,C,precision,seconds,macs,macs_per_token";
std::string bench_csv(const std::vector<BenchRow>& rows);

// Ratios between consecutive lengths of one operator, in the order of `rows`.
struct Scaling {
  std::string op;
  std::vector<double> time_ratios;
  bool macs_linear = true;  // macs / T identical at every length
};

std::vector<Scaling> bench_scaling(const std::vector<BenchRow>& rows);

}  // namespace unilion
