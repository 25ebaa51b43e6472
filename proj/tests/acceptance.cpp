// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bdnet/analysis.hpp"
#include "bdnet/bench.hpp"
#include "bdnet/error.hpp"
#include "bdnet/layers.hpp"
#include "bdnet/quantize.hpp"
#include "bdnet/verify.hpp"
#include "gradcheck.hpp"

using namespace bdnet;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1 ----------------------------------------------------------------------

Outcome cost_table() {
  const auto t0 = Clock::now();
  const auto rows = table1_rows();
  const double dt = seconds_since(t0);
  const double expect[4] = {462e6, 3.61e6, 7.23e6, 56.4e3};
  double worst = 0.0;
  bool identity = true;
  for (std::size_t i = 0; i < 4; ++i) {
    worst = std::max(worst, std::abs(rows[i].ops - expect[i]) / expect[i]);
    identity = identity && rows[i].ops == static_cast<double>(rows[i].bops) / 64.0 +
                                               static_cast<double>(rows[i].flops);
  }
  return {worst <= 0.005 && identity && dt < 1.0,
          fmt("ops %.4g %.4g %.4g %.4g, worst rel dev %.2e, %.3fs", rows[0].ops, rows[1].ops,
              rows[2].ops, rows[3].ops, worst, dt)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome kernel_oracles() {
  const auto t0 = Clock::now();
  const VerifyReport r = verify_kernels(1000, 2024);
  const double dt = seconds_since(t0);
  bool counts = true;
  for (const auto& v : verify_variants()) counts = counts && r.count(v) == 1000;
  return {r.failures == 0 && counts && dt < 60.0,
          fmt("%zu cases over %zu variants, %zu mismatches, %.1fs", r.cases.size(),
              verify_variants().size(), r.failures, dt)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome quantizer_decomposition() {
  const std::size_t n = 1000000, C = 4;
  std::mt19937_64 rng(3);
  std::normal_distribution<float> d(0.0f, 1.5f);
  Tensor x(Shape{n / C, C, 1, 1});
  for (auto& v : x.data()) v = d(rng);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f), m(0.0f, 2.0f);
  DualQuantParams q;
  for (std::size_t c = 0; c < C; ++c) {
    float a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    q.alpha1.push_back(a);
    q.alpha2.push_back(b);
    q.beta1.push_back(m(rng));
    q.beta2.push_back(m(rng));
  }
  const Tensor t = ternarize(x, q);
  const Tensor s = binarize(x, q.first()) + binarize(x, q.second());
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < n; ++i) mismatches += t[i] != s[i];
  const double b2 = effective_bits(2), b3 = effective_bits(3);
  return {mismatches == 0 && std::abs(b2 - 1.58) < 0.005 && b3 == 2.0,
          fmt("%zu/%zu mismatches, bits(2)=%.4f, bits(3)=%.1f", mismatches, n, b2, b3)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome conditioning() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> lg_alpha(1.0, 4.0), lg_lmin(-3.0, 1.0);
  int improved = 0, approx_cases = 0, approx_ok = 0;
  double worst_factored = 0.0, worst_approx = 0.0;
  for (int t = 0; t < 100; ++t) {
    const double alpha = std::pow(10.0, lg_alpha(rng));
    const double lmin = std::pow(10.0, lg_lmin(rng));
    const Matrix j = random_spd_dw_jacobian(2, 4, 4, lmin, 1000 + t);
    const ConditionReport r = condition_numbers(j, alpha);
    improved += r.kappa_j_prime < r.kappa_j;
    worst_factored = std::max(worst_factored, std::abs(r.factored - r.kappa_j_prime) / r.kappa_j_prime);
    if (r.spectrum_j.back() <= alpha / 100.0) {
      ++approx_cases;
      const double rel = std::abs(r.approx - r.kappa_j_prime) / r.kappa_j_prime;
      worst_approx = std::max(worst_approx, rel);
      approx_ok += rel <= 0.10;
    }
  }
  const double dt = seconds_since(t0);
  return {improved == 100 && worst_factored <= 1e-10 && approx_ok == approx_cases &&
              approx_cases > 0 && dt < 30.0,
          fmt("kappa' < kappa in %d/100, factored rel err %.1e, approx within 10%% in %d/%d "
              "(worst %.3f), %.1fs",
              improved, worst_factored, approx_ok, approx_cases, worst_approx, dt)};
}

// ---- 5 ----------------------------------------------------------------------

Outcome block_jacobians() {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> ch(1, 3), sp(3, 5);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::uniform_real_distribution<float> pos(0.25f, 2.0f);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t C = ch(rng), H = sp(rng), W = sp(rng), n = C * H * W;
    const ConvSpec dw = ConvSpec::depthwise(C, 3, 1, 1);
    Tensor w(dw.weight_shape()), x(Shape{1, C, H, W});
    for (auto& v : w.data()) v = nd(rng);
    for (auto& v : x.data()) v = nd(rng);
    BNParams p = BNParams::identity(C);
    for (std::size_t c = 0; c < C; ++c) {
      p.gamma[c] = pos(rng) * (nd(rng) < 0 ? -1.0f : 1.0f);
      p.beta_shift[c] = nd(rng);
      p.mu[c] = nd(rng);
      p.var[c] = pos(rng);
    }
    const Matrix j = dw_conv_matrix(w, H, W);
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i / (H * W);
      a(i, i) = p.gamma[c] / std::sqrt(static_cast<double>(p.var[c]) + p.eps);
    }
    const ConvFn conv = [&](const Tensor& v) { return conv_float(v, w, dw); };
    const Matrix post_expect = a * j + Matrix::identity(n);
    const Matrix pre_expect = a * j + a + Matrix::identity(n);
    const Matrix post = jacobian_of_block([&](const Tensor& v) { return post_bn_block(v, conv, p); }, x);
    const Matrix pre = jacobian_of_block([&](const Tensor& v) { return pre_bn_block(v, conv, p) + v; }, x);
    worst = std::max(worst, (post + post_expect * -1.0).max_abs() / post_expect.max_abs());
    worst = std::max(worst, (pre + pre_expect * -1.0).max_abs() / pre_expect.max_abs());
  }
  return {worst <= 1e-3, fmt("20 blocks, worst relative deviation %.2e", worst)};
}

// ---- 6 and 7 ------------------------------------------------------------------

struct Arm {
  const char* name;
  BlockTopology topology;
  std::size_t n_convs;
};
const Arm kArms[4] = {{"baseline", BlockTopology::NoResidual, 1},
                      {"+prebn", BlockTopology::PreBNResidual, 1},
                      {"+dual", BlockTopology::NoResidual, 2},
                      {"prebn+dual", BlockTopology::PreBNResidual, 2}};
constexpr int kSeeds = 5;

struct Trained {
  double final_acc[kSeeds][4];
  double late_var[kSeeds][4];
  std::vector<Network> baseline, full;
  std::vector<Split> probe_batch;
};

SyntheticSpec ablation_data(int seed) {
  SyntheticSpec s;
  s.kind = SyntheticKind::Blobs;
  s.n = 768;
  s.classes = 8;
  s.noise = 0.2;
  s.h = s.w = 12;
  s.seed = static_cast<std::uint64_t>(seed);
  return s;
}

ModelConfig ablation_model(const Arm& arm) {
  ModelConfig mc;
  mc.in_h = mc.in_w = 12;
  mc.classes = 8;
  mc.stages = {{16, 1}, {32, 2}, {32, 1}, {64, 2}, {64, 1}, {64, 1}, {64, 1}, {64, 1}};
  mc.topology = arm.topology;
  mc.n_convs = arm.n_convs;
  return mc;
}

Trained train_ablation() {
  Trained out;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const Dataset data = gen_synthetic(ablation_data(seed));
    std::vector<std::size_t> idx(data.train.size());
    std::iota(idx.begin(), idx.end(), 0);
    out.probe_batch.push_back(data.train.gather(idx, 0, 128));
    for (int a = 0; a < 4; ++a) {
      Network net(ablation_model(kArms[a]), static_cast<std::uint64_t>(seed));
      TrainConfig tc;
      tc.optimizer = OptimizerKind::Adam;
      tc.schedule = LrSchedule::Linear;
      tc.lr = 1e-2;
      tc.epochs = 16;
      tc.batch_size = 32;
      tc.seed = static_cast<std::uint64_t>(seed);
      tc.two_step = true;
      double acc = 0.0, var = 1.0;
      try {
        const auto curve = train(net, data, tc).accuracy_curve("val");
        const std::size_t h = curve.size() / 2;
        double mean = 0.0;
        for (std::size_t i = h; i < curve.size(); ++i) mean += curve[i];
        mean /= static_cast<double>(curve.size() - h);
        var = 0.0;
        for (std::size_t i = h; i < curve.size(); ++i) var += (curve[i] - mean) * (curve[i] - mean);
        var /= static_cast<double>(curve.size() - h);
        acc = curve.back();
      } catch (const DivergenceError& e) {
        std::printf("  seed %d %s: %s\n", seed, kArms[a].name, e.what());
      }
      out.final_acc[seed][a] = acc;
      out.late_var[seed][a] = var;
      std::printf("  seed %d %-10s final val acc %.3f, late-epoch var %.2e\n", seed, kArms[a].name,
                  acc, var);
      std::fflush(stdout);
      if (a == 0) out.baseline.push_back(std::move(net));
      if (a == 3) out.full.push_back(std::move(net));
    }
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome stability(const Trained& t, double dt) {
  int wins = 0, steadier = 0, both = 0;
  for (int s = 0; s < kSeeds; ++s) {
    const bool w = t.final_acc[s][3] > t.final_acc[s][0];
    const bool v = t.late_var[s][3] < t.late_var[s][0];
    wins += w;
    steadier += v;
    both += w && v;
  }
  double med[4];
  for (int a = 0; a < 4; ++a) {
    std::vector<double> v;
    for (int s = 0; s < kSeeds; ++s) v.push_back(t.final_acc[s][a]);
    med[a] = median(v);
  }
  const bool order = med[0] < med[1] && med[0] < med[2] && med[1] < med[3] && med[2] < med[3];
  return {both >= 4 && order && dt <= 600.0,
          fmt("prebn+dual beats baseline in %d/5 seeds, steadier in %d/5, both in %d/5; median "
              "acc baseline %.3f, +prebn %.3f, +dual %.3f, prebn+dual %.3f; %.0fs",
              wins, steadier, both, med[0], med[1], med[2], med[3], dt)};
}

Outcome probe_eigensolver() {
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    std::mt19937_64 rng(70 + t);
    const int n = 30;
    std::normal_distribution<double> d(0.0, 1.0);
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) g(i, j) = d(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    Eigen::VectorXd spec(n);
    for (int i = 0; i < n; ++i) spec(i) = 0.2 * std::pow(0.7, i) * (i == 1 ? -1.0 : 1.0);
    spec(0) = 10.0 + t;
    spec(1) = -(6.0 + t);
    spec(2) = 3.0;
    const Eigen::MatrixXd h = q * spec.asDiagonal() * q.transpose();
    const HvpFn hvp = [&](const std::vector<double>& v) {
      const Eigen::VectorXd r = h * Eigen::Map<const Eigen::VectorXd>(v.data(), n);
      return std::vector<double>(r.data(), r.data() + n);
    };
    const HessianResult r = hessian_topk(hvp, n, 3, static_cast<std::uint64_t>(t), 2000, 1e-9);
    for (int i = 0; i < 3; ++i)
      worst = std::max(worst, std::abs(r.eigenvalues[i] - spec(i)) / std::abs(spec(i)));
  }
  return {worst <= 1e-3, fmt("probe eigenvalues within %.1e relative", worst)};
}

Outcome hessian_comparison(Trained& t) {
  int lower = 0;
  std::string vals;
  for (int s = 0; s < kSeeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    const double lb = hessian_topk(t.baseline[s], t.probe_batch[s], 1, seed, 60, 1e-3).eigenvalues[0];
    const double lf = hessian_topk(t.full[s], t.probe_batch[s], 1, seed, 60, 1e-3).eigenvalues[0];
    lower += std::abs(lf) < std::abs(lb);
    vals += fmt(" %.2f/%.2f", lf, lb);
  }
  const Outcome probe = probe_eigensolver();
  return {lower >= 4 && probe.pass,
          fmt("lambda_max prebn+dual < baseline in %d/5 seeds (prebn+dual/baseline:%s); %s", lower,
              vals.c_str(), probe.detail.c_str())};
}

// ---- 8 ----------------------------------------------------------------------

Outcome bench_ordering() {
  const Geometry g;
  const auto a = bench_suite(g), b = bench_suite(g);
  std::map<std::string, double> m;
  double drift = 0.0;
  std::string drift_op;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m[a[i].op] = a[i].median_ms;
    const double d = std::abs(a[i].median_ms - b[i].median_ms) / std::min(a[i].median_ms, b[i].median_ms);
    if (d >= drift) {
      drift = d;
      drift_op = a[i].op;
    }
  }
  const double speedup = m["float_conv"] / m["binary_conv"];
  const double dual_res = m["dual_binary_dw"] + m["residual_add"];
  return {speedup >= 2.0 && dual_res < m["binary_conv"] && drift < 0.2,
          fmt("binary conv %.1fx faster than float conv, dual dw + residual %.3f ms vs binary conv "
              "%.3f ms, max median drift %.1f%% (%s)",
              speedup, dual_res, m["binary_conv"], 100.0 * drift, drift_op.c_str())};
}

// ---- 9 ----------------------------------------------------------------------

Outcome gradients() {
  double worst = 0.0, worst_mag = 0.0;
  std::string worst_name;
  for (unsigned seed : {1u, 2u, 3u}) {
    for (const auto& g : testing::float_path_gradchecks(seed)) {
      if (g.rel_error >= worst) {
        worst = g.rel_error;
        worst_name = g.name;
      }
    }
    worst_mag = std::max(worst_mag, testing::magnitude_gradcheck(seed));
  }
  return {worst < 1e-4 && worst_mag < 1e-6,
          fmt("worst float-path rel error %.1e (%s), magnitude gradient %.1e", worst,
              worst_name.c_str(), worst_mag)};
}

// ---- 10 ---------------------------------------------------------------------

int brute_otsu(const std::array<std::uint64_t, 256>& h) {
  using i128 = __int128;
  i128 total = 0, sum = 0;
  for (int i = 0; i < 256; ++i) {
    total += h[i];
    sum += static_cast<i128>(h[i]) * i;
  }
  int best = 0;
  i128 best_num = 0, best_den = 1;
  for (int t = 0; t < 256; ++t) {
    i128 n0 = 0, s0 = 0;
    for (int i = 0; i < t; ++i) {
      n0 += h[i];
      s0 += static_cast<i128>(h[i]) * i;
    }
    const i128 n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const i128 diff = total * s0 - n0 * sum;
    const i128 num = diff * diff, den = n0 * n1;
    if (num * best_den > best_num * den) {
      best = t;
      best_num = num;
      best_den = den;
    }
  }
  return best;
}

Outcome visualization() {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::uint64_t> cnt(0, 1000);
  std::bernoulli_distribution sparse(0.8);
  int agree = 0;
  for (int t = 0; t < 100; ++t) {
    std::array<std::uint64_t, 256> h{};
    for (auto& v : h) v = (t % 2 && sparse(rng)) ? 0 : cnt(rng);
    agree += otsu_threshold(h) == brute_otsu(h);
  }
  Tensor ramp(Shape{1, 1, 16, 256});
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 256; ++x) ramp.at(0, 0, y, x) = static_cast<float>(x);
  const auto th = otsu_two_thresholds(histogram256(ramp));
  const Tensor tern = ternarize_image(ramp, th[0], th[1]);
  const std::size_t levels = std::set<float>(tern.data().begin(), tern.data().end()).size();
  return {agree == 100 && levels == 3,
          fmt("otsu matches brute force on %d/100 histograms; ramp ternarized to %zu levels "
              "(thresholds %d/%d)",
              agree, levels, th[0], th[1])};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance criteria");
  std::vector<int> only;
  app.add_option("criteria", only, "criteria to run (default: all)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  const std::set<int> run = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                         : std::set<int>(only.begin(), only.end());
  bool all = true;
  auto report = [&](int id, const char* title, const Outcome& o) {
    std::printf("criterion %2d %-28s %s  %s\n", id, title, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& f) -> Outcome {
    try {
      return f();
    } catch (const std::exception& e) {
      return {false, std::string("error: ") + e.what()};
    }
  };
  if (run.count(1)) report(1, "cost model", guarded(cost_table));
  if (run.count(2)) report(2, "kernel oracle equivalence", guarded(kernel_oracles));
  if (run.count(3)) report(3, "quantizer decomposition", guarded(quantizer_decomposition));
  if (run.count(4)) report(4, "conditioning", guarded(conditioning));
  if (run.count(5)) report(5, "block jacobians", guarded(block_jacobians));
  if (run.count(6) || run.count(7)) {
    const auto t0 = Clock::now();
    Trained t = train_ablation();
    const double dt = seconds_since(t0);
    if (run.count(6)) report(6, "desk-scale stability", stability(t, dt));
    if (run.count(7)) report(7, "hessian spectrum", guarded([&] { return hessian_comparison(t); }));
  }
  if (run.count(8)) report(8, "bench ordering", guarded(bench_ordering));
  if (run.count(9)) report(9, "gradient checks", guarded(gradients));
  if (run.count(10)) report(10, "visualization", guarded(visualization));
  return all ? 0 : 1;
}
