#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bdnet {

enum class BenchOp { FloatConv, BinaryConv, FloatDW, BinaryDW, DualBinaryDW, ResidualAdd };

const char* to_string(BenchOp op);
BenchOp bench_op_from_string(const std::string& s);
std::vector<BenchOp> all_bench_ops();

/// Square-kernel 3x3 geometry: H x W spatial, C input and output channels.
struct Geometry {
  std::size_t h = 56;
  std::size_t w = 56;
  std::size_t c = 128;
  /// "HxW:C", e.g. "56x56:128".
  static Geometry parse(const std::string& s);
  std::string str() const;
};

struct BenchResult {
  std::string op;
  Geometry geometry;
  double median_ms = 0.0;
  double iqr_ms = 0.0;
  std::size_t reps = 0;
  std::size_t warmup = 0;
};

inline constexpr std::size_t kMinReps = 30;
inline constexpr std::size_t kMinWarmup = 5;
/// Fast ops get extra repetitions until the timed region spans this long.
inline constexpr double kMinTimedMs = 300.0;
inline constexpr std::size_t kMaxReps = 20000;

/// Times one op single-threaded on a steady clock. Inputs are generated
/// before timing; binary ops include packing of the activations. `reps` is a
/// lower bound; the result reports the count actually timed.
BenchResult bench_op(BenchOp op, const Geometry& g, std::size_t reps = kMinReps,
                     std::size_t warmup = kMinWarmup);

/// All six ops at one geometry, in all_bench_ops() order.
std::vector<BenchResult> bench_suite(const Geometry& g = {}, std::size_t reps = kMinReps,
                                     std::size_t warmup = kMinWarmup);

void write_latency_csv(std::ostream& os, const std::vector<BenchResult>& rows);

}  // namespace bdnet
