#include "bdnet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>
#include <regex>

#include "bdnet/bit_tensor.hpp"
#include "bdnet/error.hpp"
#include "bdnet/kernels.hpp"
#include "bdnet/parallel.hpp"
#include "bdnet/quantize.hpp"

namespace bdnet {

const char* to_string(BenchOp op) {
  switch (op) {
    case BenchOp::FloatConv: return "float_conv";
    case BenchOp::BinaryConv: return "binary_conv";
    case BenchOp::FloatDW: return "float_dw";
    case BenchOp::BinaryDW: return "binary_dw";
    case BenchOp::DualBinaryDW: return "dual_binary_dw";
    case BenchOp::ResidualAdd: return "residual_add";
  }
  return "?";
}

std::vector<BenchOp> all_bench_ops() {
  return {BenchOp::FloatConv, BenchOp::BinaryConv,   BenchOp::FloatDW,
          BenchOp::BinaryDW,  BenchOp::DualBinaryDW, BenchOp::ResidualAdd};
}

BenchOp bench_op_from_string(const std::string& s) {
  for (BenchOp op : all_bench_ops()) {
    if (s == to_string(op)) return op;
  }
  throw UsageError("unknown bench op '" + s + "'");
}

Geometry Geometry::parse(const std::string& s) {
  static const std::regex re(R"((\d{1,6})x(\d{1,6}):(\d{1,6}))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) {
    throw UsageError("geometry must look like HxW:C, got '" + s + "'");
  }
  Geometry g{std::stoul(m[1]), std::stoul(m[2]), std::stoul(m[3])};
  if (g.h == 0 || g.w == 0 || g.c == 0) throw UsageError("geometry has a zero extent");
  return g;
}

std::string Geometry::str() const {
  return std::to_string(h) + "x" + std::to_string(w) + ":" + std::to_string(c);
}

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor t(s);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

}  // namespace

BenchResult bench_op(BenchOp op, const Geometry& g, std::size_t reps, std::size_t warmup) {
  if (reps < kMinReps) throw UsageError("bench needs at least 30 timed repetitions");
  if (warmup < kMinWarmup) throw UsageError("bench needs at least 5 warmup runs");
  ThreadLimit single(1);
  std::mt19937_64 rng(1234);
  const Shape in{1, g.c, g.h, g.w};
  const ConvSpec regular = ConvSpec::regular(g.c, g.c, 3, 1, 1);
  const ConvSpec dw = ConvSpec::depthwise(g.c, 3, 1, 1);
  const Tensor x = random_tensor(in, rng);
  const Tensor w_reg = random_tensor(regular.weight_shape(), rng);
  const Tensor w_dw = random_tensor(dw.weight_shape(), rng);
  const Tensor w_dw2 = random_tensor(dw.weight_shape(), rng);
  const BinaryConvWeights b_reg = BinaryConvWeights::from_real(w_reg);
  const BinaryConvWeights b_dw = BinaryConvWeights::from_real(w_dw);
  const BinaryConvWeights b_dw2 = BinaryConvWeights::from_real(w_dw2);
  const DualQuantParams q = DualQuantParams::uniform(g.c, -0.25f, 0.25f, 0.5f, 0.5f);
  Tensor acc(in);

  volatile float sink = 0.0f;
  auto run = [&]() {
    switch (op) {
      case BenchOp::FloatConv: sink = sink + conv_float(x, w_reg, regular)[0]; break;
      case BenchOp::BinaryConv: sink = sink + conv_binary(pack(x), b_reg, regular)[0]; break;
      case BenchOp::FloatDW: sink = sink + conv_float(x, w_dw, dw)[0]; break;
      case BenchOp::BinaryDW: sink = sink + conv_binary(pack(x), b_dw, dw)[0]; break;
      case BenchOp::DualBinaryDW: sink = sink + conv_dual_dw(x, b_dw, b_dw2, q, dw)[0]; break;
      case BenchOp::ResidualAdd:
        acc += x;
        sink = sink + acc[acc.size() - 1];
        break;
    }
  };
  const auto w0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < warmup; ++i) run();
  const double warm_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - w0).count();
  const double per_run = std::max(warm_ms / static_cast<double>(warmup), 1e-6);
  reps = std::clamp(static_cast<std::size_t>(std::ceil(kMinTimedMs / per_run)), reps, kMaxReps);
  std::vector<double> ms;
  ms.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  auto quantile = [&](double p) {
    const double pos = p * static_cast<double>(ms.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, ms.size() - 1);
    return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
  };
  BenchResult r;
  r.op = to_string(op);
  r.geometry = g;
  r.median_ms = quantile(0.5);
  r.iqr_ms = quantile(0.75) - quantile(0.25);
  r.reps = reps;
  r.warmup = warmup;
  return r;
}

std::vector<BenchResult> bench_suite(const Geometry& g, std::size_t reps, std::size_t warmup) {
  std::vector<BenchResult> out;
  for (BenchOp op : all_bench_ops()) out.push_back(bench_op(op, g, reps, warmup));
  return out;
}

void write_latency_csv(std::ostream& os, const std::vector<BenchResult>& rows) {
  os << "op,geometry,median_ms,iqr_ms,reps,warmup\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%zu,%zu\n", r.op.c_str(),
                  r.geometry.str().c_str(), r.median_ms, r.iqr_ms, r.reps, r.warmup);
    os << buf;
  }
}

}  // namespace bdnet
