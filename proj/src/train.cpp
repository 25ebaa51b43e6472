#include "bdnet/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "bdnet/error.hpp"

namespace bdnet {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be >= 0");
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  if (weight_decay < 0.0) throw UsageError("weight decay must be >= 0");
  if (two_step && (step1_fraction <= 0.0 || step1_fraction >= 1.0)) {
    throw UsageError("step1 fraction must be in (0, 1)");
  }
}

Split Split::gather(const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) const {
  const Shape s = x.shape();
  Split out{Tensor(Shape{end - begin, s.c, s.h, s.w}), {}};
  const std::size_t per = s.c * s.plane();
  for (std::size_t i = begin; i < end; ++i) {
    std::copy_n(x.data().begin() + idx[i] * per, per, out.x.data().begin() + (i - begin) * per);
    out.y.push_back(y[idx[i]]);
  }
  return out;
}

void Dataset::validate() const {
  if (train.size() == 0) throw UsageError("dataset has no training samples");
  for (const Split* s : {&train, &val}) {
    if (s->size() && s->x.shape().n != s->size()) throw UsageError("dataset size mismatch");
    for (int y : s->y) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) throw UsageError("label out of range");
    }
  }
}

SyntheticKind synthetic_kind_from_string(const std::string& s) {
  if (s == "blobs") return SyntheticKind::Blobs;
  if (s == "spirals") return SyntheticKind::Spirals;
  throw UsageError("unknown synthetic dataset '" + s + "' (blobs|spirals)");
}

namespace {

void lift(const SyntheticSpec& spec, double p0, double p1, std::mt19937_64& rng, float* out) {
  std::normal_distribution<double> noise(0.0, spec.pixel_noise);
  const double pd = (p0 + p1) / std::numbers::sqrt2;
  const double qd = (p0 - p1) / std::numbers::sqrt2;
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t h = 0; h < spec.h; ++h) {
      for (std::size_t w = 0; w < spec.w; ++w) {
        const double rows = (h / 2) % 2 ? -1.0 : 1.0;
        const double cols = (w / 2) % 2 ? -1.0 : 1.0;
        const double diag = ((h + w) / 2) % 2 ? -1.0 : 1.0;
        double v = 0.0;
        switch (c % 3) {
          case 0: v = p0 * rows + p1 * cols; break;
          case 1: v = p1 * rows - p0 * cols; break;
          default: v = pd * diag + qd; break;
        }
        *out++ = static_cast<float>(v + noise(rng));
      }
    }
  }
}

Split make_split(std::size_t n, const SyntheticSpec& spec) {
  return {Tensor(Shape{std::max<std::size_t>(n, 1), spec.channels, spec.h, spec.w}), {}};
}

}  // namespace

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.n < 2 || spec.classes < 2) throw UsageError("synthetic dataset needs n >= 2, classes >= 2");
  if (spec.channels == 0 || spec.h == 0 || spec.w == 0) throw UsageError("zero image extent");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<int> labels(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) labels[i] = static_cast<int>(i % spec.classes);
  std::shuffle(labels.begin(), labels.end(), rng);

  const auto n_val = static_cast<std::size_t>(std::round(spec.val_fraction * spec.n));
  const std::size_t n_train = spec.n - n_val;
  Dataset d{make_split(n_train, spec), make_split(n_val, spec), spec.classes};
  if (n_val == 0) d.val = Split{};
  const std::size_t per = spec.channels * spec.h * spec.w;
  const double K = static_cast<double>(spec.classes);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const int y = labels[i];
    double p0, p1;
    if (spec.kind == SyntheticKind::Blobs) {
      const double a = 2.0 * std::numbers::pi * y / K;
      p0 = std::cos(a) + spec.noise * gauss(rng);
      p1 = std::sin(a) + spec.noise * gauss(rng);
    } else {
      const double t = unif(rng);
      const double a = 2.0 * std::numbers::pi * y / K + 3.0 * std::numbers::pi * t;
      const double r = 0.15 + 0.85 * t;
      p0 = r * std::cos(a) + spec.noise * gauss(rng);
      p1 = r * std::sin(a) + spec.noise * gauss(rng);
    }
    Split& s = i < n_train ? d.train : d.val;
    const std::size_t j = i < n_train ? i : i - n_train;
    lift(spec, p0, p1, rng, s.x.data().data() + j * per);
    s.y.push_back(y);
  }
  return d;
}

namespace {

template <class T>
bool parse_number(std::string_view s, T& out) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

}  // namespace

Dataset read_csv_dataset(std::istream& is, Shape sample, std::size_t classes, double val_fraction,
                         std::uint64_t seed) {
  const std::size_t per = sample.c * sample.h * sample.w;
  std::vector<int> labels;
  std::vector<float> pixels;
  std::string line;
  std::size_t lineno = 0;
  bool seen_row = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    int label = -1;
    if (!parse_number(cells[0], label)) {
      if (!seen_row) {  // header
        seen_row = true;
        continue;
      }
      throw FormatError("csv line " + std::to_string(lineno) + ": bad label '" + cells[0] + "'");
    }
    seen_row = true;
    std::vector<float> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      float v = 0.0f;
      if (!parse_number(cells[i], v) || !std::isfinite(v)) {
        throw FormatError("csv line " + std::to_string(lineno) + ": bad number '" + cells[i] + "'");
      }
      row.push_back(v);
    }
    if (row.size() != per) {
      throw FormatError("csv line " + std::to_string(lineno) + ": expected " + std::to_string(per) +
                        " pixels, got " + std::to_string(row.size()));
    }
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw FormatError("csv line " + std::to_string(lineno) + ": label out of range");
    }
    labels.push_back(label);
    pixels.insert(pixels.end(), row.begin(), row.end());
  }
  if (labels.empty()) throw FormatError("csv dataset is empty");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Split all{Tensor(Shape{labels.size(), sample.c, sample.h, sample.w}, std::move(pixels)),
            std::move(labels)};
  const auto n_val = static_cast<std::size_t>(std::round(val_fraction * all.size()));
  const std::size_t n_train = all.size() - n_val;
  if (n_train == 0) throw UsageError("validation fraction leaves no training samples");
  Dataset d{all.gather(order, 0, n_train), Split{}, classes};
  if (n_val > 0) d.val = all.gather(order, n_train, all.size());
  return d;
}

std::vector<double> TrainReport::accuracy_curve(const std::string& split) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.split == split) out.push_back(r.accuracy);
  }
  return out;
}

void TrainReport::write_csv(std::ostream& os) const {
  os << "epoch,split,loss,accuracy\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g\n", r.epoch, r.split.c_str(), r.loss,
                  r.accuracy);
    os << buf;
  }
}

namespace {

bool decayed(const Param& p) { return p.kind == ParamKind::Weight || p.kind == ParamKind::Bias; }

void ensure_state(std::vector<std::vector<double>>& s, const std::vector<Param*>& params) {
  if (s.size() == params.size()) return;
  s.clear();
  for (const Param* p : params) s.emplace_back(p->value.size(), 0.0);
}

}  // namespace

void SGD::step(const std::vector<Param*>& params, double lr, double weight_decay) {
  ensure_state(velocity_, params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    if (!p.trainable()) continue;
    const double wd = decayed(p) ? weight_decay : 0.0;
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] + wd * p.value[i];
      v[i] = momentum_ * v[i] + g;
      p.value[i] = static_cast<float>(p.value[i] - lr * v[i]);
    }
  }
}

void Adam::step(const std::vector<Param*>& params, double lr, double weight_decay) {
  ensure_state(m_, params);
  ensure_state(v_, params);
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    if (!p.trainable()) continue;
    const double wd = decayed(p) ? weight_decay : 0.0;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] + wd * p.value[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * g;
      v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      p.value[i] = static_cast<float>(p.value[i] - lr * mh / (std::sqrt(vh) + eps_));
    }
  }
}

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch, std::size_t epochs) {
  const double t = static_cast<double>(epoch) / static_cast<double>(std::max<std::size_t>(epochs, 1));
  if (cfg.schedule == LrSchedule::Cosine) return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return cfg.lr * (1.0 - t);
}

EvalResult evaluate(Network& net, const Split& split, std::size_t batch_size) {
  if (split.size() == 0) return {0.0, 0.0};
  std::vector<std::size_t> idx(split.size());
  std::iota(idx.begin(), idx.end(), 0);
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    const Split batch = split.gather(idx, b, e);
    const LossResult r = softmax_cross_entropy(net.forward(batch.x, false), batch.y);
    loss += r.loss * static_cast<double>(e - b);
    correct += r.correct;
  }
  const double n = static_cast<double>(split.size());
  return {loss / n, static_cast<double>(correct) / n};
}

double loss_and_grad(Network& net, const Split& batch) {
  std::vector<std::vector<float>> saved;
  auto params = net.params();
  for (const Param* p : params) {
    if (p->kind == ParamKind::Buffer) saved.push_back(p->value);
  }
  net.zero_grad();
  const LossResult r = softmax_cross_entropy(net.forward(batch.x, true), batch.y);
  net.backward(r.dlogits);
  std::size_t k = 0;
  for (Param* p : params) {
    if (p->kind == ParamKind::Buffer) p->value = saved[k++];
  }
  return r.loss;
}

namespace {

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg) {
  if (cfg.optimizer == OptimizerKind::SGD) return std::make_unique<SGD>(cfg.momentum);
  return std::make_unique<Adam>(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
}

void clamp_magnitudes(Network& net) {
  for (Param* p : net.params()) {
    if (p->kind != ParamKind::Quantizer) continue;
    if (p->name.ends_with("_scale")) {
      for (auto& v : p->value) v = std::max(v, 0.0f);
    }
  }
}

[[noreturn]] void diverged(const Network& net, std::size_t epoch, double loss) {
  std::string worst = "?";
  double alpha = -1.0;
  for (const auto& [name, a] : net.bn_alpha_max()) {
    if (!(a <= alpha)) {
      alpha = a;
      worst = name;
    }
  }
  std::ostringstream msg;
  msg << "training diverged at epoch " << epoch << " (loss " << loss << "); largest BN scale "
      << alpha << " in layer " << worst;
  throw DivergenceError(msg.str());
}

void run_phase(Network& net, const Dataset& data, const TrainConfig& cfg, std::size_t epochs,
               double weight_decay, std::size_t epoch_offset, std::mt19937_64& rng,
               TrainReport& report) {
  auto opt = make_optimizer(cfg);
  auto params = net.params();
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < epochs; ++e) {
    const double lr = scheduled_lr(cfg, e, epochs);
    std::shuffle(order.begin(), order.end(), rng);
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const Split batch = data.train.gather(order, b, end);
      net.zero_grad();
      const LossResult r = softmax_cross_entropy(net.forward(batch.x, true), batch.y);
      if (!std::isfinite(r.loss)) diverged(net, epoch_offset + e + 1, r.loss);
      net.backward(r.dlogits);
      opt->step(params, lr, weight_decay);
      clamp_magnitudes(net);
      net.sort_branches();
      loss += r.loss * static_cast<double>(end - b);
      correct += r.correct;
    }
    const double n = static_cast<double>(order.size());
    const std::size_t epoch = epoch_offset + e + 1;
    report.rows.push_back({epoch, "train", loss / n, static_cast<double>(correct) / n});
    if (data.val.size()) {
      const EvalResult v = evaluate(net, data.val, cfg.batch_size);
      if (!std::isfinite(v.loss)) diverged(net, epoch, v.loss);
      report.rows.push_back({epoch, "val", v.loss, v.accuracy});
    }
  }
}

}  // namespace

TrainReport train(Network& net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.classes != net.config().classes) throw UsageError("dataset/model class count mismatch");
  const Shape in = net.input_shape(1);
  const Shape s = data.train.x.shape();
  if (s.c != in.c || s.h != in.h || s.w != in.w) {
    throw UsageError("dataset sample shape " + s.str() + " does not match model input " + in.str());
  }
  std::mt19937_64 rng(cfg.seed);
  TrainReport report;
  if (!cfg.two_step) {
    run_phase(net, data, cfg, cfg.epochs, cfg.weight_decay, 0, rng, report);
    return report;
  }
  const auto e1 = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(cfg.step1_fraction * cfg.epochs)), 1,
      std::max<std::size_t>(cfg.epochs, 2) - 1);
  const std::size_t e2 = cfg.epochs > e1 ? cfg.epochs - e1 : 1;
  net.set_precision(Precision::BinaryActivations);
  run_phase(net, data, cfg, e1, cfg.weight_decay, 0, rng, report);
  net.set_precision(Precision::Binary);
  net.reset_weight_magnitudes();
  run_phase(net, data, cfg, e2, 0.0, e1, rng, report);
  return report;
}

}  // namespace bdnet
