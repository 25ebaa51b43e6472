#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "bdnet/analysis.hpp"
#include "bdnet/bench.hpp"
#include "bdnet/error.hpp"
#include "bdnet/parallel.hpp"
#include "bdnet/pgm.hpp"
#include "bdnet/quantize.hpp"
#include "bdnet/train.hpp"
#include "bdnet/verify.hpp"

namespace fs = std::filesystem;
using namespace bdnet;

namespace {

struct ModelFlags {
  std::string variant = "A";
  std::size_t n_convs = 2;
  double width = 1.0;
  std::string stages = "32:1,64:2,128:1,128:2,256:1";
  std::string input = "3x32x32";
  std::size_t classes = 10;
  std::string topology = "pre-bn";
  bool regular_conv = false;

  void add(CLI::App* app) {
    app->add_option("--variant", variant, "A (all DW binary) or B (stride-2 DW real)")
        ->check(CLI::IsMember({"A", "B"}));
    app->add_option("--n-convs", n_convs, "parallel binary convs per DW layer (1..4)");
    app->add_option("--width", width, "width multiplier");
    app->add_option("--stages", stages, "stage spec channels:stride,...");
    app->add_option("--input", input, "input shape CxHxW");
    app->add_option("--classes", classes, "class count");
    app->add_option("--topology", topology, "none | post-bn | pre-bn");
    app->add_flag("--regular-conv", regular_conv, "3x3 regular convs instead of DW");
  }

  ModelConfig config() const {
    ModelConfig c;
    c.variant = variant == "B" ? Variant::B : Variant::A;
    c.n_convs = n_convs;
    c.width_multiplier = width;
    c.stages.clear();
    std::stringstream ss(stages);
    std::string item;
    while (std::getline(ss, item, ',')) {
      StageSpec s{};
      char colon = 0;
      if (std::sscanf(item.c_str(), "%zu%c%zu", &s.channels, &colon, &s.stride) != 3 || colon != ':') {
        throw UsageError("bad stage '" + item + "' (want channels:stride)");
      }
      c.stages.push_back(s);
    }
    if (std::sscanf(input.c_str(), "%zux%zux%zu", &c.in_channels, &c.in_h, &c.in_w) != 3) {
      throw UsageError("bad input shape '" + input + "' (want CxHxW)");
    }
    c.classes = classes;
    c.topology = topology_from_string(topology);
    c.regular_conv = regular_conv;
    c.validate();
    return c;
  }
};

struct DataFlags {
  std::string source = "blobs";
  std::size_t n = 512;
  double noise = 0.1;
  double val_fraction = 0.25;

  void add(CLI::App* app) {
    app->add_option("--data", source, "blobs | spirals | path to label,pix0,... CSV");
    app->add_option("--samples", n, "synthetic sample count");
    app->add_option("--noise", noise, "synthetic point noise");
    app->add_option("--val-fraction", val_fraction, "validation share");
  }

  Dataset load(const ModelConfig& m, std::uint64_t seed) const {
    if (source == "blobs" || source == "spirals") {
      SyntheticSpec s;
      s.kind = synthetic_kind_from_string(source);
      s.n = n;
      s.classes = m.classes;
      s.seed = seed;
      s.noise = noise;
      s.val_fraction = val_fraction;
      s.channels = m.in_channels;
      s.h = m.in_h;
      s.w = m.in_w;
      return gen_synthetic(s);
    }
    std::ifstream is(source);
    if (!is) throw UsageError("cannot open dataset " + source);
    return read_csv_dataset(is, Shape{1, m.in_channels, m.in_h, m.in_w}, m.classes, val_fraction,
                            seed);
  }
};

fs::path prepare(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw UsageError("cannot write " + p.string());
  return os;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cmd_verify(std::size_t cases, std::uint64_t seed, bool corrupt, const std::string& out) {
  const VerifyReport r = verify_kernels(cases, seed, corrupt ? PadValue::MinusOne : PadValue::Zero);
  const fs::path dir = prepare(out);
  auto os = open_out(dir / "verify.csv");
  write_verify_csv(os, r);
  for (const auto& v : verify_variants()) {
    std::printf("%-15s %zu cases, %zu mismatches\n", v.c_str(), r.count(v), r.failures_of(v));
  }
  std::printf("%s: %zu/%zu cases bit-exact (per-case shapes in %s)\n",
              r.failures ? "FAIL" : "OK", r.cases.size() - r.failures, r.cases.size(),
              (dir / "verify.csv").string().c_str());
  return r.failures ? 1 : 0;
}

std::string si(double v) {
  char buf[32];
  if (v >= 1e6) std::snprintf(buf, sizeof buf, "%.3gM", v / 1e6);
  else if (v >= 1e3) std::snprintf(buf, sizeof buf, "%.3gK", v / 1e3);
  else std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

int cmd_cost(bool table1, const ModelFlags& mf, const std::string& out) {
  if (table1) {
    std::printf("%-20s %14s %14s %10s\n", "op", "bops", "flops", "ops");
    for (const auto& r : table1_rows()) {
      std::printf("%-20s %14llu %14llu %10s\n", r.layer.c_str(),
                  static_cast<unsigned long long>(r.bops), static_cast<unsigned long long>(r.flops),
                  si(r.ops).c_str());
    }
    return 0;
  }
  const Network net(mf.config(), 0);
  const CostReport rep = count_ops(net);
  const fs::path dir = prepare(out);
  auto os = open_out(dir / "cost.csv");
  write_cost_csv(os, rep);
  std::printf("total: bops %llu  flops %llu  ops %s  (%s)\n",
              static_cast<unsigned long long>(rep.total.bops),
              static_cast<unsigned long long>(rep.total.flops), si(rep.total.ops).c_str(),
              (dir / "cost.csv").string().c_str());
  return 0;
}

int cmd_condition(double amin, double amax, std::size_t steps, std::size_t channels,
                  std::size_t size, double lambda_min, std::uint64_t seed, const std::string& out) {
  if (!(amin > 0.0) || amax < amin || steps < 1) throw UsageError("bad alpha grid");
  const Matrix j = random_spd_dw_jacobian(channels, size, size, lambda_min, seed);
  const fs::path dir = prepare(out);
  auto os = open_out(dir / "condition.csv");
  os << "alpha,kappa_j,kappa_j_prime,kappa_h,kappa_h_prime,factored,approx,approx_abs_error\n";
  std::vector<double> alphas{0.0};
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    alphas.push_back(amin * std::pow(amax / amin, t));
  }
  char buf[256];
  for (double a : alphas) {
    const ConditionReport r = condition_numbers(j, a);
    std::snprintf(buf, sizeof buf, "%.9g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.6g\n", a, r.kappa_j,
                  r.kappa_j_prime, r.kappa_h, r.kappa_h_prime, r.factored, r.approx,
                  r.approx_abs_error);
    os << buf;
    std::printf("alpha %-10.4g kappa(J) %-10.5g kappa(J') %-10.5g approx err %.3g\n", a, r.kappa_j,
                r.kappa_j_prime, r.approx_abs_error);
  }
  return 0;
}

TrainConfig train_config(const std::string& opt, const std::string& sched, double lr, double wd,
                         std::size_t epochs, std::size_t batch, std::uint64_t seed, bool two_step,
                         double step1) {
  TrainConfig t;
  t.optimizer = opt == "sgd" ? OptimizerKind::SGD : OptimizerKind::Adam;
  t.schedule = sched == "cosine" ? LrSchedule::Cosine : LrSchedule::Linear;
  t.lr = lr;
  t.weight_decay = wd;
  t.epochs = epochs;
  t.batch_size = batch;
  t.seed = seed;
  t.two_step = two_step;
  t.step1_fraction = step1;
  t.validate();
  return t;
}

Network model_from(const std::string& checkpoint, const ModelFlags& mf, std::uint64_t seed) {
  if (!checkpoint.empty()) return load_checkpoint(read_file(checkpoint));
  return Network(mf.config(), seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bdnet: binary depth-wise network toolkit"};
  app.require_subcommand(1);
  std::string out = "out";
  std::uint64_t seed = 0;
  app.add_option("--out", out, "output directory")->capture_default_str();
  app.add_option("--seed", seed, "random seed")->capture_default_str();

  auto* verify = app.add_subcommand("verify", "packed kernels vs float oracle");
  std::size_t cases = 1000;
  bool corrupt = false;
  verify->add_option("--cases", cases, "random cases per kernel variant")->capture_default_str();
  verify->add_flag("--corrupt-pad", corrupt, "run the packed kernels with -1 padding");

  auto* cost = app.add_subcommand("cost", "operation counts (cost.csv)");
  bool table1 = false;
  cost->add_flag("--table1", table1, "print the 56x56x128 3x3 conv comparison");
  ModelFlags cost_model;
  cost_model.add(cost);

  auto* condition = app.add_subcommand("condition", "conditioning sweep over alpha");
  double amin = 1.0, amax = 1e4, lambda_min = 0.1;
  std::size_t steps = 9, channels = 2, size = 6;
  condition->add_option("--alpha-min", amin)->capture_default_str();
  condition->add_option("--alpha-max", amax)->capture_default_str();
  condition->add_option("--steps", steps, "log-spaced alphas (an alpha=0 row is always added)")
      ->capture_default_str();
  condition->add_option("--channels", channels)->capture_default_str();
  condition->add_option("--size", size, "spatial extent of the DW Jacobian")->capture_default_str();
  condition->add_option("--lambda-min", lambda_min, "smallest eigenvalue of J")->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "quantization-aware training");
  ModelFlags train_model;
  train_model.add(train_cmd);
  DataFlags train_data;
  train_data.add(train_cmd);
  std::string opt = "adam", sched = "linear", precision = "binary";
  double lr = 1e-3, wd = 0.0, step1 = 0.5;
  std::size_t epochs = 10, batch = 32;
  bool two_step = false;
  train_cmd->add_option("--optimizer", opt)->check(CLI::IsMember({"sgd", "adam"}))->capture_default_str();
  train_cmd->add_option("--schedule", sched)->check(CLI::IsMember({"cosine", "linear"}))->capture_default_str();
  train_cmd->add_option("--lr", lr)->capture_default_str();
  train_cmd->add_option("--weight-decay", wd)->capture_default_str();
  train_cmd->add_option("--epochs", epochs)->capture_default_str();
  train_cmd->add_option("--batch", batch)->capture_default_str();
  train_cmd->add_flag("--two-step", two_step, "binary activations first, then fully binary");
  train_cmd->add_option("--step1-fraction", step1)->capture_default_str();
  train_cmd->add_option("--precision", precision, "float | binary-activations | binary (one-step)")
      ->capture_default_str();

  auto* landscape = app.add_subcommand("landscape", "loss along filter-normalized directions");
  ModelFlags land_model;
  land_model.add(landscape);
  DataFlags land_data;
  land_data.add(landscape);
  std::string land_ckpt, mode = "2d-surface";
  std::size_t grid = 41;
  double span = 1.0;
  std::uint64_t dir_seed = 0;
  landscape->add_option("--checkpoint", land_ckpt, "trained model (default: fresh init)");
  landscape->add_option("--grid", grid, "points per axis (odd)")->capture_default_str();
  landscape->add_option("--span", span)->capture_default_str();
  landscape->add_option("--mode", mode, "2d-line | 2d-surface")->capture_default_str();
  landscape->add_option("--direction-seed", dir_seed)->capture_default_str();

  auto* hessian = app.add_subcommand("hessian", "top-k Hessian eigenvalues (spectrum.csv)");
  ModelFlags hess_model;
  hess_model.add(hessian);
  DataFlags hess_data;
  hess_data.add(hessian);
  std::string hess_ckpt, probe;
  std::size_t k = 5, hess_batch = 128, iters = 100;
  hessian->add_option("-k", k, "eigenvalue count (<= 10)")->capture_default_str();
  hessian->add_option("--checkpoint", hess_ckpt, "trained model (default: fresh init)");
  hessian->add_option("--probe", probe, "comma-separated eigenvalues of a quadratic probe");
  hessian->add_option("--batch", hess_batch)->capture_default_str();
  hessian->add_option("--max-iter", iters)->capture_default_str();

  auto* bench = app.add_subcommand("bench", "single-thread op latency (latency.csv)");
  std::string geometry = "56x56:128", bench_out = "latency.csv";
  std::size_t reps = kMinReps, warmup = kMinWarmup;
  bench->add_option("--geometry", geometry, "HxW:C")->capture_default_str();
  bench->add_option("--reps", reps)->capture_default_str();
  bench->add_option("--warmup", warmup)->capture_default_str();
  bench->add_option("--out", bench_out, "CSV path (relative paths land in the output directory)")
      ->capture_default_str();

  auto* visualize = app.add_subcommand("visualize", "grayscale / Otsu / 1.58-bit PGM triptych");
  std::string pgm;
  std::size_t ramp = 0;
  visualize->add_option("--input", pgm, "8-bit P5 PGM");
  visualize->add_option("--ramp", ramp, "use a WxW horizontal 0..255 ramp instead of --input");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    apply_thread_env();
    if (*verify) return cmd_verify(cases, seed, corrupt, out);
    if (*cost) return cmd_cost(table1, cost_model, out);
    if (*condition) return cmd_condition(amin, amax, steps, channels, size, lambda_min, seed, out);
    if (*train_cmd) {
      const ModelConfig mc = train_model.config();
      const Dataset data = train_data.load(mc, seed);
      Network net(mc, seed);
      if (!two_step) net.set_precision(precision_from_string(precision));
      const TrainReport rep =
          train(net, data, train_config(opt, sched, lr, wd, epochs, batch, seed, two_step, step1));
      const fs::path dir = prepare(out);
      auto os = open_out(dir / "report.csv");
      rep.write_csv(os);
      auto ck = open_out(dir / "model.ckpt");
      ck << save_checkpoint(net);
      const auto val = rep.accuracy_curve("val");
      const auto tr = rep.accuracy_curve("train");
      std::printf("final train accuracy %.4f, val accuracy %.4f (%s)\n", tr.back(),
                  val.empty() ? 0.0 : val.back(), (dir / "report.csv").string().c_str());
      return 0;
    }
    if (*landscape) {
      Network net = model_from(land_ckpt, land_model, seed);
      const Dataset data = land_data.load(net.config(), seed);
      const auto g = landscape_grid(net, data.train, dir_seed, grid, span,
                                    landscape_mode_from_string(mode));
      const fs::path dir = prepare(out);
      auto os = open_out(dir / "landscape.csv");
      write_landscape_csv(os, g);
      std::printf("%zu grid points, centre loss %.6g\n", g.size(), g[g.size() / 2].loss);
      return 0;
    }
    if (*hessian) {
      HessianResult r;
      if (!probe.empty()) {
        std::vector<double> eig;
        std::stringstream ss(probe);
        std::string item;
        while (std::getline(ss, item, ',')) eig.push_back(std::stod(item));
        const std::size_t d = eig.size();
        // A = Q diag(eig) Q^T with a random orthogonal Q (Gram-Schmidt).
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<std::vector<double>> q(d, std::vector<double>(d));
        for (std::size_t i = 0; i < d; ++i) {
          for (auto& v : q[i]) v = g(rng);
          for (std::size_t j = 0; j < i; ++j) {
            double dp = 0.0;
            for (std::size_t t = 0; t < d; ++t) dp += q[i][t] * q[j][t];
            for (std::size_t t = 0; t < d; ++t) q[i][t] -= dp * q[j][t];
          }
          double nrm = 0.0;
          for (double v : q[i]) nrm += v * v;
          for (auto& v : q[i]) v /= std::sqrt(nrm);
        }
        HvpFn hvp = [&](const std::vector<double>& v) {
          std::vector<double> out(d, 0.0);
          for (std::size_t i = 0; i < d; ++i) {
            double c = 0.0;
            for (std::size_t t = 0; t < d; ++t) c += q[i][t] * v[t];
            for (std::size_t t = 0; t < d; ++t) out[t] += eig[i] * c * q[i][t];
          }
          return out;
        };
        r = hessian_topk(hvp, d, std::min(k, d), seed, std::max<std::size_t>(iters, 1000), 1e-12);
      } else {
        Network net = model_from(hess_ckpt, hess_model, seed);
        const Dataset data = hess_data.load(net.config(), seed);
        std::vector<std::size_t> idx(data.train.size());
        std::iota(idx.begin(), idx.end(), 0);
        const Split b = data.train.gather(idx, 0, std::min(hess_batch, idx.size()));
        r = hessian_topk(net, b, k, seed, iters);
      }
      const fs::path dir = prepare(out);
      auto os = open_out(dir / "spectrum.csv");
      write_spectrum_csv(os, r);
      for (std::size_t i = 0; i < r.eigenvalues.size(); ++i) {
        std::printf("lambda_%zu = %.9g  residual %.3g%s\n", i + 1, r.eigenvalues[i], r.residuals[i],
                    r.converged[i] ? "" : "  (not converged)");
      }
      return 0;
    }
    if (*bench) {
      const auto rows = bench_suite(Geometry::parse(geometry), reps, warmup);
      fs::path path(bench_out);
      if (path.is_relative()) path = prepare(out) / path;
      auto os = open_out(path);
      write_latency_csv(os, rows);
      for (const auto& r : rows) {
        std::printf("%-15s %10.4f ms  (IQR %.4f)\n", r.op.c_str(), r.median_ms, r.iqr_ms);
      }
      return 0;
    }
    if (*visualize) {
      Tensor gray;
      if (ramp > 0) {
        gray = Tensor(Shape{1, 1, ramp, ramp});
        for (std::size_t y = 0; y < ramp; ++y)
          for (std::size_t x = 0; x < ramp; ++x)
            gray.at(0, 0, y, x) = ramp == 1 ? 0.0f
                                            : std::round(255.0f * static_cast<float>(x) /
                                                         static_cast<float>(ramp - 1));
      } else if (!pgm.empty()) {
        gray = read_pgm(pgm);
      } else {
        throw UsageError("visualize needs --input or --ramp");
      }
      const auto hist = histogram256(gray);
      const int t = otsu_threshold(hist);
      const auto t2 = otsu_two_thresholds(hist);
      const fs::path dir = prepare(out);
      write_pgm(dir / "grayscale.pgm", gray);
      write_pgm(dir / "otsu.pgm", binarize_image(gray, t));
      write_pgm(dir / "ternary.pgm", ternarize_image(gray, t2[0], t2[1]));
      auto levels = [](const Tensor& img) {
        return std::set<float>(img.data().begin(), img.data().end()).size();
      };
      std::printf("otsu threshold %d, 1.58-bit thresholds %d/%d -> %s\n", t, t2[0], t2[1],
                  dir.string().c_str());
      std::printf("levels: otsu %zu, 1.58-bit %zu\n", levels(read_pgm(dir / "otsu.pgm")),
                  levels(read_pgm(dir / "ternary.pgm")));
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
