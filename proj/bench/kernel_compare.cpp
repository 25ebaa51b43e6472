// Serial reference kernels vs the OpenMP-parallel kernels.
#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "CLI11.hpp"
#include "bdnet/bench.hpp"
#include "bdnet/kernels.hpp"

using namespace bdnet;

namespace {

double median_ms(const std::function<void()>& f, int reps) {
  f();
  std::vector<double> t;
  for (int i = 0; i < reps; ++i) {
    const auto a = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - a).count());
  }
  std::nth_element(t.begin(), t.begin() + reps / 2, t.end());
  return t[reps / 2];
}

Tensor random_tensor(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor t(s);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Reference vs parallel kernel timings");
  std::string geometry = "28x28:64";
  int reps = 5;
  app.add_option("--geometry", geometry, "HxW:C");
  app.add_option("--reps", reps, "timed repetitions")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const Geometry g = Geometry::parse(geometry);
  std::mt19937_64 rng(7);
  const Shape in{1, g.c, g.h, g.w};
  const ConvSpec reg = ConvSpec::regular(g.c, g.c, 3, 1, 1);
  const ConvSpec dw = ConvSpec::depthwise(g.c, 3, 1, 1);
  const Tensor x = random_tensor(in, rng);
  const Tensor w = random_tensor(reg.weight_shape(), rng);
  const BitTensor xb = pack(x);
  const BinaryConvWeights bw = BinaryConvWeights::from_real(w);
  std::vector<BinaryBranch> branches;
  for (float th : {-0.25f, 0.25f})
    branches.push_back({BinaryConvWeights::from_real(random_tensor(dw.weight_shape(), rng)),
                        std::vector<float>(g.c, th), std::vector<float>(g.c, 0.5f)});

  struct Row {
    const char* name;
    std::function<void()> ref, par;
  };
  volatile float sink = 0.0f;
  const std::vector<Row> rows = {
      {"float_conv", [&] { sink = sink + reference::conv_float(x, w, reg)[0]; },
       [&] { sink = sink + conv_float(x, w, reg)[0]; }},
      {"binary_conv", [&] { sink = sink + reference::conv_binary(xb, bw, reg)[0]; },
       [&] { sink = sink + conv_binary(xb, bw, reg)[0]; }},
      {"dual_binary_dw", [&] { sink = sink + reference::conv_multi_dw(x, branches, dw)[0]; },
       [&] { sink = sink + conv_multi_dw(x, branches, dw)[0]; }},
  };
  std::printf("geometry %s, %d threads\n", g.str().c_str(), omp_get_max_threads());
  std::printf("%-16s %12s %12s %8s\n", "op", "reference_ms", "parallel_ms", "speedup");
  for (const Row& r : rows) {
    const double a = median_ms(r.ref, reps), b = median_ms(r.par, reps);
    std::printf("%-16s %12.3f %12.3f %8.1fx\n", r.name, a, b, a / b);
  }
  return 0;
}
