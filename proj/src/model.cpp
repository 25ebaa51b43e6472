#include "bdnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "bdnet/error.hpp"
#include "bdnet/quantize.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace bdnet {

using nlohmann::json;

const char* to_string(Variant v) { return v == Variant::A ? "A" : "B"; }

const char* to_string(Precision p) {
  switch (p) {
    case Precision::Float: return "float";
    case Precision::BinaryActivations: return "binary-activations";
    case Precision::Binary: return "binary";
  }
  return "?";
}

Precision precision_from_string(const std::string& s) {
  if (s == "float") return Precision::Float;
  if (s == "binary-activations") return Precision::BinaryActivations;
  if (s == "binary") return Precision::Binary;
  throw UsageError("unknown precision '" + s + "' (float|binary-activations|binary)");
}

ModelConfig ModelConfig::baseline() {
  ModelConfig c;
  c.n_convs = 1;
  c.topology = BlockTopology::NoResidual;
  return c;
}

ModelConfig ModelConfig::bdnet() {
  ModelConfig c;
  c.n_convs = 2;
  c.topology = BlockTopology::PreBNResidual;
  return c;
}

std::vector<std::size_t> ModelConfig::scaled_channels() const {
  std::vector<std::size_t> out;
  for (const auto& s : stages) {
    const double scaled = static_cast<double>(s.channels) * width_multiplier;
    const auto up = static_cast<std::size_t>(std::ceil(scaled / 8.0 - 1e-9)) * 8;
    out.push_back(std::max<std::size_t>(8, up));
  }
  return out;
}

void ModelConfig::validate() const {
  if (n_convs < 1 || n_convs > 4) throw UsageError("n_convs must be in [1, 4]");
  if (!(width_multiplier > 0.0)) throw UsageError("width multiplier must be positive");
  if (stages.empty()) throw UsageError("stage spec is empty");
  if (in_channels == 0 || in_h == 0 || in_w == 0) throw UsageError("input shape has a zero extent");
  if (classes < 2) throw UsageError("need at least 2 classes");
  const auto ch = scaled_channels();
  std::size_t h = in_h, w = in_w;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].stride != 1 && stages[i].stride != 2) {
      throw UsageError("stage " + std::to_string(i) + ": stride must be 1 or 2");
    }
    if (stages[i].channels == 0) throw UsageError("stage " + std::to_string(i) + ": zero channels");
    if (i > 0 && ch[i] < ch[i - 1] && topology != BlockTopology::NoResidual) {
      throw UsageError("stage " + std::to_string(i) +
                       ": channel count decreases, residual cannot be broadcast");
    }
    h = (h - 1) / stages[i].stride + 1;
    w = (w - 1) / stages[i].stride + 1;
  }
  if (h == 0 || w == 0) throw UsageError("stage strides reduce the input to nothing");
}

std::string ModelConfig::to_json() const {
  json j;
  j["variant"] = to_string(variant);
  j["n_convs"] = n_convs;
  j["width_multiplier"] = width_multiplier;
  json st = json::array();
  for (const auto& s : stages) st.push_back({s.channels, s.stride});
  j["stages"] = st;
  j["input"] = {in_channels, in_h, in_w};
  j["classes"] = classes;
  j["topology"] = bdnet::to_string(topology);
  j["regular_conv"] = regular_conv;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelConfig c;
    const std::string v = j.at("variant");
    if (v != "A" && v != "B") throw UsageError("unknown variant " + v);
    c.variant = v == "A" ? Variant::A : Variant::B;
    c.n_convs = j.at("n_convs");
    c.width_multiplier = j.at("width_multiplier");
    c.stages.clear();
    for (const auto& s : j.at("stages")) c.stages.push_back({s.at(0), s.at(1)});
    c.in_channels = j.at("input").at(0);
    c.in_h = j.at("input").at(1);
    c.in_w = j.at("input").at(2);
    c.classes = j.at("classes");
    c.topology = topology_from_string(j.at("topology"));
    c.regular_conv = j.at("regular_conv");
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad model config json: ") + e.what());
  }
}

Param::Param(std::string n, Shape s, ParamKind k, float fill)
    : name(std::move(n)), shape(s), kind(k), value(s.size(), fill), grad(s.size(), 0.0f) {}

namespace {

constexpr float kClip = 1.0f;

Tensor as_tensor(const Param& p) { return Tensor(p.shape, p.value); }

void add_grad(Param& p, const Tensor& g) {
  for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g[i];
}

void add_grad(Param& p, const std::vector<double>& g) {
  for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += static_cast<float>(g[i]);
}

void fill_normal(Param& p, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : p.value) v = static_cast<float>(d(rng));
}

// Convolution unit: N parallel (optionally quantized) convs summed, BN,
// residual topology, shifted PReLU.
class ConvUnit final : public Module {
 public:
  ConvUnit(std::string name, ConvSpec spec, bool real_valued, BlockTopology topo,
           std::size_t branches, std::mt19937_64& rng)
      : name_(std::move(name)),
        spec_(spec),
        real_(real_valued),
        topo_(topo),
        gamma_(name_ + ".bn.gamma", {spec.out_channels, 1, 1, 1}, ParamKind::Norm, 1.0f),
        beta_(name_ + ".bn.beta", {spec.out_channels, 1, 1, 1}, ParamKind::Norm, 0.0f),
        mu_(name_ + ".bn.mean", {spec.out_channels, 1, 1, 1}, ParamKind::Buffer, 0.0f),
        var_(name_ + ".bn.var", {spec.out_channels, 1, 1, 1}, ParamKind::Buffer, 1.0f),
        shift_in_(name_ + ".act.shift_in", {spec.out_channels, 1, 1, 1}, ParamKind::Norm, 0.0f),
        slope_(name_ + ".act.slope", {spec.out_channels, 1, 1, 1}, ParamKind::Norm, 0.25f),
        shift_out_(name_ + ".act.shift_out", {spec.out_channels, 1, 1, 1}, ParamKind::Norm, 0.0f) {
    spec_.validate();
    const std::size_t fan_in = spec.in_per_group() * spec.kh * spec.kw;
    // Activation magnitudes of regular convs must be uniform across input
    // channels for the packed kernels, so they are frozen there.
    const ParamKind amag_kind = spec_.is_depthwise() ? ParamKind::Quantizer : ParamKind::Buffer;
    for (std::size_t i = 0; i < branches; ++i) {
      const std::string b = name_ + ".b" + std::to_string(i);
      const float th = branches == 1 ? 0.0f
                                     : -0.25f + 0.5f * static_cast<float>(i) /
                                                    static_cast<float>(branches - 1);
      Branch br{Param(b + ".weight", spec.weight_shape(), ParamKind::Weight),
                Param(b + ".weight_scale", {spec.out_channels, 1, 1, 1}, ParamKind::Quantizer),
                Param(b + ".act_threshold", {spec.in_channels, 1, 1, 1}, ParamKind::Quantizer, th),
                Param(b + ".act_scale", {spec.in_channels, 1, 1, 1}, amag_kind,
                      1.0f / static_cast<float>(branches))};
      fill_normal(br.w, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
      br_.push_back(std::move(br));
    }
    reset_weight_magnitudes();
  }

  const std::string& name() const override { return name_; }
  const ConvSpec& spec() const { return spec_; }

  void set_anchor(const Tensor& x) {
    anchor_x_ = x;
    anchor_w_.clear();
    for (const auto& b : br_) anchor_w_.push_back(b.w.value);
    anchor_u_ = Tensor();
    record_u_ = true;
    linear_ = true;
  }
  void clear_anchor() {
    linear_ = false;
    anchor_x_ = Tensor();
    anchor_u_ = Tensor();
    anchor_w_.clear();
    record_u_ = false;
  }
  bool real_valued() const { return real_; }

  std::vector<Param*> params() override {
    std::vector<Param*> out;
    for (auto& b : br_) {
      out.push_back(&b.w);
      out.push_back(&b.wmag);
      out.push_back(&b.th);
      out.push_back(&b.amag);
    }
    for (Param* p : {&gamma_, &beta_, &mu_, &var_, &shift_in_, &slope_, &shift_out_}) {
      out.push_back(p);
    }
    return out;
  }

  Shape output_shape(const Shape& in) const override { return spec_.output_shape(in); }

  std::vector<LayerCost> costs(const Shape& in) const override {
    const Shape os = spec_.output_shape(in);
    LayerCost c;
    c.name = name_;
    c.macs = static_cast<std::uint64_t>(os.plane()) * os.c * spec_.in_per_group() * spec_.kh *
             spec_.kw;
    c.binary = !real_;
    c.branches = br_.size();
    c.type = std::string(real_ ? "float_" : "binary_") + (spec_.is_depthwise() ? "dw" : "conv");
    return {c};
  }

  void reset_weight_magnitudes() {
    const std::size_t per = spec_.in_per_group() * spec_.kh * spec_.kw;
    for (auto& b : br_) {
      for (std::size_t o = 0; o < spec_.out_channels; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < per; ++i) s += std::abs(b.w.value[o * per + i]);
        b.wmag.value[o] = static_cast<float>(s / static_cast<double>(per));
      }
    }
  }

  void sort_branches() {
    if (!spec_.is_depthwise() || br_.size() < 2) return;
    const std::size_t per = spec_.kh * spec_.kw;
    std::vector<std::size_t> order(br_.size());
    for (std::size_t c = 0; c < spec_.in_channels; ++c) {
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return br_[a].th.value[c] < br_[b].th.value[c];
      });
      if (std::is_sorted(order.begin(), order.end())) continue;
      std::vector<float> th, am, wm, filt;
      for (std::size_t k : order) {
        th.push_back(br_[k].th.value[c]);
        am.push_back(br_[k].amag.value[c]);
        wm.push_back(br_[k].wmag.value[c]);
        filt.insert(filt.end(), br_[k].w.value.begin() + c * per,
                    br_[k].w.value.begin() + (c + 1) * per);
      }
      for (std::size_t i = 0; i < br_.size(); ++i) {
        br_[i].th.value[c] = th[i];
        br_[i].amag.value[c] = am[i];
        br_[i].wmag.value[c] = wm[i];
        std::copy(filt.begin() + i * per, filt.begin() + (i + 1) * per,
                  br_[i].w.value.begin() + c * per);
      }
    }
  }

  double bn_alpha_max() const {
    double m = 0.0;
    for (std::size_t c = 0; c < spec_.out_channels; ++c) {
      m = std::max(m, std::abs(gamma_.value[c]) / std::sqrt(static_cast<double>(var_.value[c]) + 1e-5));
    }
    return m;
  }

  Tensor forward(const Tensor& x, bool training) override {
    const bool quant_act = !real_ && precision_ != Precision::Float;
    const bool quant_w = !real_ && precision_ == Precision::Binary;
    cache_.x = x;
    cache_.act.clear();
    cache_.weff.clear();
    Tensor conv(spec_.output_shape(x.shape()));
    for (std::size_t i = 0; i < br_.size(); ++i) {
      const Branch& b = br_[i];
      Tensor a = quant_act ? quantize_activation(x, b) : x;
      Tensor w = quant_w ? effective_weight(b) : as_tensor(b.w);
      if (linear_) linearize(x, b, i, quant_act, quant_w, a, w);
      conv += conv_float(a, w, spec_);
      if (training) {
        cache_.act.push_back(std::move(a));
        cache_.weff.push_back(std::move(w));
      }
    }
    BNParams bn = bn_params();
    Tensor res;
    Tensor u;
    switch (topo_) {
      case BlockTopology::NoResidual:
        u = batchnorm_forward(conv, bn, training, &cache_.bn);
        break;
      case BlockTopology::PostBNResidual:
        res = match_residual(x, conv.shape());
        u = batchnorm_forward(conv, bn, training, &cache_.bn);
        u += res;
        break;
      case BlockTopology::PreBNResidual:
        res = match_residual(x, conv.shape());
        conv += res;
        u = batchnorm_forward(conv, bn, training, &cache_.bn);
        u += res;
        break;
    }
    if (training) {
      std::copy(bn.mu.begin(), bn.mu.end(), mu_.value.begin());
      std::copy(bn.var.begin(), bn.var.end(), var_.value.begin());
      cache_.u = u;
    }
    if (linear_ && record_u_) {
      anchor_u_ = u;
      record_u_ = false;
    }
    return shifted_prelu(u, shift_in_.value, slope_.value, shift_out_.value, prelu_side());
  }

  Tensor backward(const Tensor& dy) override {
    const bool quant_act = !real_ && precision_ != Precision::Float;
    const bool quant_w = !real_ && precision_ == Precision::Binary;
    PReLUGrads pg = shifted_prelu_backward(dy, cache_.u, shift_in_.value, slope_.value, prelu_side());
    add_grad(shift_in_, pg.dshift_in);
    add_grad(slope_, pg.dslope);
    add_grad(shift_out_, pg.dshift_out);
    const Tensor& du = pg.dx;

    BNGrads bg = batchnorm_backward(du, cache_.bn, bn_params());
    add_grad(gamma_, bg.dgamma);
    add_grad(beta_, bg.dbeta);
    const Tensor& dconv = bg.dx;

    Tensor dres;
    if (topo_ == BlockTopology::PostBNResidual) dres = du;
    if (topo_ == BlockTopology::PreBNResidual) dres = du + dconv;

    Tensor dx(cache_.x.shape());
    if (topo_ != BlockTopology::NoResidual) dx = residual_backward(dres, cache_.x.shape());

    const std::size_t per = spec_.in_per_group() * spec_.kh * spec_.kw;
    for (std::size_t i = 0; i < br_.size(); ++i) {
      Branch& b = br_[i];
      const Tensor da = conv_float_backward_input(dconv, cache_.weff[i], spec_, cache_.x.shape());
      const Tensor dweff = conv_float_backward_weight(dconv, cache_.act[i], spec_);
      if (quant_w) {
        for (std::size_t o = 0; o < spec_.out_channels; ++o) {
          double dm = 0.0;
          for (std::size_t k = 0; k < per; ++k) {
            const std::size_t idx = o * per + k;
            const float w = b.w.value[idx];
            const float w0 = linear_ ? anchor_w_[i][idx] : w;
            const bool live = std::abs(w0) <= kClip;
            double s = w0 >= 0.0f ? 1.0 : -1.0;
            if (linear_ && live) s += w - w0;
            dm += static_cast<double>(dweff[idx]) * s;
            if (live) b.w.grad[idx] += dweff[idx] * b.wmag.value[o];
          }
          b.wmag.grad[o] += static_cast<float>(dm);
        }
      } else {
        add_grad(b.w, dweff);
      }
      if (quant_act && !linear_) {
        const BinQuantGrads g = binarize_backward(cache_.x, {b.th.value, b.amag.value}, da, kClip);
        dx += g.dx;
        add_grad(b.th, g.dthreshold);
        if (b.amag.kind != ParamKind::Buffer) add_grad(b.amag, g.dmagnitude);
      } else if (quant_act) {
        const Shape& s = cache_.x.shape();
        for (std::size_t c = 0; c < s.c; ++c) {
          const float th = b.th.value[c], m = b.amag.value[c];
          double dth = 0.0, dm = 0.0;
          for (std::size_t n = 0; n < s.n; ++n) {
            auto xv = cache_.x.plane(n, c);
            auto x0 = linear_ ? anchor_x_.plane(n, c) : xv;
            auto g = da.plane(n, c);
            auto d = dx.plane(n, c);
            for (std::size_t k = 0; k < xv.size(); ++k) {
              const float z = x0[k] - th;
              const bool live = std::abs(z) <= kClip;
              double s = z >= 0.0f ? 1.0 : -1.0;
              if (linear_ && live) s += xv[k] - x0[k];
              dm += static_cast<double>(g[k]) * s;
              if (live) {
                d[k] += g[k] * m;
                dth -= static_cast<double>(g[k]) * m;
              }
            }
          }
          b.th.grad[c] += static_cast<float>(dth);
          if (b.amag.kind != ParamKind::Buffer) b.amag.grad[c] += static_cast<float>(dm);
        }
      } else {
        dx += da;
      }
    }
    return dx;
  }

  Tensor forward_bitwise(const Tensor& x) const override {
    if (real_ || precision_ != Precision::Binary) return const_cast<ConvUnit*>(this)->eval(x);
    Tensor conv(spec_.output_shape(x.shape()));
    if (spec_.is_depthwise()) {
      std::vector<BinaryBranch> branches;
      for (const auto& b : br_) {
        branches.push_back({BinaryConvWeights::from_real(as_tensor(b.w), b.wmag.value), b.th.value,
                            b.amag.value});
      }
      conv = conv_multi_dw(x, branches, spec_);
    } else {
      for (const auto& b : br_) {
        const float m = b.amag.value[0];
        if (std::any_of(b.amag.value.begin(), b.amag.value.end(), [m](float v) { return v != m; })) {
          throw InvariantError(name_ + ": packed regular conv needs a uniform activation scale");
        }
        const BitTensor xb = pack(x, b.th.value);
        Tensor y = conv_binary(xb, BinaryConvWeights::from_real(as_tensor(b.w), b.wmag.value), spec_);
        for (auto& v : y.data()) v *= m;
        conv += y;
      }
    }
    return finish_eval(x, conv);
  }

  Tensor eval(const Tensor& x) {
    const bool quant_act = !real_ && precision_ != Precision::Float;
    const bool quant_w = !real_ && precision_ == Precision::Binary;
    Tensor conv(spec_.output_shape(x.shape()));
    for (auto& b : br_) {
      conv += conv_float(quant_act ? quantize_activation(x, b) : x,
                         quant_w ? effective_weight(b) : as_tensor(b.w), spec_);
    }
    return finish_eval(x, conv);
  }

 private:
  struct Branch {
    Param w, wmag, th, amag;
  };
  struct Cache {
    Tensor x, u;
    std::vector<Tensor> act, weff;
    BNCache bn;
  };

  const Tensor* prelu_side() const {
    return linear_ && !record_u_ && anchor_u_.size() > 0 ? &anchor_u_ : nullptr;
  }

  BNParams bn_params() const {
    BNParams p;
    p.gamma = gamma_.value;
    p.beta_shift = beta_.value;
    p.mu = mu_.value;
    p.var = var_.value;
    return p;
  }

  Tensor finish_eval(const Tensor& x, Tensor conv) const {
    const BNParams bn = bn_params();
    Tensor u;
    if (topo_ == BlockTopology::NoResidual) {
      u = batchnorm_forward(conv, bn);
    } else if (topo_ == BlockTopology::PostBNResidual) {
      u = batchnorm_forward(conv, bn);
      u += match_residual(x, conv.shape());
    } else {
      const Tensor res = match_residual(x, conv.shape());
      conv += res;
      u = batchnorm_forward(conv, bn);
      u += res;
    }
    return shifted_prelu(u, shift_in_.value, slope_.value, shift_out_.value);
  }

  // First-order expansion of the STE surrogate around the anchored inputs and
  // weights: sign(u) becomes sign(u0) + (u - u0) inside the clip window.
  void linearize(const Tensor& x, const Branch& b, std::size_t i, bool quant_act, bool quant_w,
                 Tensor& a, Tensor& w) const {
    if (quant_act) {
      if (!(anchor_x_.shape() == x.shape())) throw UsageError(name_ + ": anchor batch mismatch");
      const Shape& s = x.shape();
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
          auto xv = x.plane(n, c);
          auto x0 = anchor_x_.plane(n, c);
          auto av = a.plane(n, c);
          const float th = b.th.value[c], m = b.amag.value[c];
          for (std::size_t k = 0; k < xv.size(); ++k) {
            const float z = x0[k] - th;
            float v = z >= 0.0f ? m : -m;
            if (std::abs(z) <= kClip) v += m * (xv[k] - x0[k]);
            av[k] = v;
          }
        }
      }
    }
    if (quant_w) {
      const std::size_t per = spec_.in_per_group() * spec_.kh * spec_.kw;
      for (std::size_t idx = 0; idx < w.size(); ++idx) {
        const float w0 = anchor_w_[i][idx], m = b.wmag.value[idx / per];
        float v = w0 >= 0.0f ? m : -m;
        if (std::abs(w0) <= kClip) v += m * (b.w.value[idx] - w0);
        w[idx] = v;
      }
    }
  }

  static Tensor quantize_activation(const Tensor& x, const Branch& b) {
    return binarize(x, BinQuantParams{b.th.value, b.amag.value});
  }

  Tensor effective_weight(const Branch& b) const {
    Tensor w = as_tensor(b.w);
    const std::size_t per = spec_.in_per_group() * spec_.kh * spec_.kw;
    for (std::size_t o = 0; o < spec_.out_channels; ++o) {
      for (std::size_t k = 0; k < per; ++k) {
        float& v = w[o * per + k];
        v = v >= 0.0f ? b.wmag.value[o] : -b.wmag.value[o];
      }
    }
    return w;
  }

  Tensor residual_backward(const Tensor& dres, const Shape& x_shape) const {
    Tensor g = dres;
    const Shape& s = dres.shape();
    const std::size_t pooled_c = x_shape.c;
    if (s.c != pooled_c) g = broadcast_residual_backward(g, pooled_c);
    if (s.h != x_shape.h || s.w != x_shape.w) g = avg_pool_2x2_backward(g, x_shape);
    return g;
  }

  std::string name_;
  ConvSpec spec_;
  bool real_;
  BlockTopology topo_;
  std::vector<Branch> br_;
  Param gamma_, beta_, mu_, var_, shift_in_, slope_, shift_out_;
  Cache cache_;
  bool linear_ = false;
  bool record_u_ = false;
  Tensor anchor_x_, anchor_u_;
  std::vector<std::vector<float>> anchor_w_;
};

// Global average pool followed by a full-precision linear classifier.
class PoolLinear final : public Module {
 public:
  PoolLinear(std::string name, std::size_t in, std::size_t classes, std::mt19937_64& rng)
      : name_(std::move(name)),
        w_(name_ + ".weight", {classes, in, 1, 1}, ParamKind::Weight),
        b_(name_ + ".bias", {classes, 1, 1, 1}, ParamKind::Bias) {
    fill_normal(w_, std::sqrt(1.0 / static_cast<double>(in)), rng);
  }

  const std::string& name() const override { return name_; }
  std::vector<Param*> params() override { return {&w_, &b_}; }
  Shape output_shape(const Shape& in) const override { return {in.n, w_.shape.n, 1, 1}; }

  std::vector<LayerCost> costs(const Shape&) const override {
    LayerCost c;
    c.name = name_;
    c.type = "linear";
    c.macs = static_cast<std::uint64_t>(w_.shape.n) * w_.shape.c;
    return {c};
  }

  Tensor forward(const Tensor& x, bool training) override {
    if (x.shape().c != w_.shape.c) throw UsageError(name_ + ": channel mismatch");
    if (training) x_shape_ = x.shape();
    pooled_ = pool(x);
    return linear(pooled_);
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t N = x_shape_.n, C = w_.shape.c, K = w_.shape.n;
    std::vector<double> dpool(N * C, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        const double g = dy[n * K + k];
        b_.grad[k] += static_cast<float>(g);
        for (std::size_t c = 0; c < C; ++c) {
          w_.grad[k * C + c] += static_cast<float>(g * pooled_[n * C + c]);
          dpool[n * C + c] += g * w_.value[k * C + c];
        }
      }
    }
    Tensor dx(x_shape_);
    const double inv = 1.0 / static_cast<double>(x_shape_.plane());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (auto& v : dx.plane(n, c)) v = static_cast<float>(dpool[n * C + c] * inv);
    return dx;
  }

  Tensor forward_bitwise(const Tensor& x) const override { return linear(pool(x)); }

 private:
  static std::vector<double> pool(const Tensor& x) {
    const Shape& s = x.shape();
    std::vector<double> out(s.n * s.c, 0.0);
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        double sum = 0.0;
        for (float v : x.plane(n, c)) sum += v;
        out[n * s.c + c] = sum / static_cast<double>(s.plane());
      }
    }
    return out;
  }

  Tensor linear(const std::vector<double>& pooled) const {
    const std::size_t C = w_.shape.c, K = w_.shape.n, N = pooled.size() / C;
    Tensor y(Shape{N, K, 1, 1});
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        double s = b_.value[k];
        for (std::size_t c = 0; c < C; ++c) s += w_.value[k * C + c] * pooled[n * C + c];
        y[n * K + k] = static_cast<float>(s);
      }
    }
    return y;
  }

  std::string name_;
  Param w_, b_;
  Shape x_shape_;
  std::vector<double> pooled_;
};

}  // namespace

Network::Network(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const auto ch = cfg_.scaled_channels();
  modules_.push_back(std::make_unique<ConvUnit>(
      "stem", ConvSpec::regular(cfg_.in_channels, ch[0], 3, 1, 1), true, BlockTopology::NoResidual,
      1, rng));
  std::size_t prev = ch[0];
  for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
    const std::size_t stride = cfg_.stages[i].stride;
    const std::string base = "stage" + std::to_string(i);
    const bool real = cfg_.variant == Variant::B && stride == 2;
    const ConvSpec dw = cfg_.regular_conv ? ConvSpec::regular(prev, prev, 3, stride, 1)
                                          : ConvSpec::depthwise(prev, 3, stride, 1);
    modules_.push_back(std::make_unique<ConvUnit>(base + ".dw", dw, real, cfg_.topology,
                                                  real ? 1 : cfg_.n_convs, rng));
    const BlockTopology pw_topo = cfg_.topology == BlockTopology::NoResidual
                                      ? BlockTopology::NoResidual
                                      : BlockTopology::PostBNResidual;
    modules_.push_back(std::make_unique<ConvUnit>(
        base + ".pw", ConvSpec::regular(prev, ch[i], 1, 1, 0), false, pw_topo, 1, rng));
    prev = ch[i];
  }
  modules_.push_back(std::make_unique<PoolLinear>("head", prev, cfg_.classes, rng));
  set_precision(Precision::Binary);
}

Tensor Network::forward(const Tensor& x, bool training) {
  if (x.shape().c != cfg_.in_channels || x.shape().h != cfg_.in_h || x.shape().w != cfg_.in_w) {
    throw UsageError("network input " + x.shape().str() + " does not match config");
  }
  Tensor h = x;
  for (auto& m : modules_) {
    if (!training) {
      if (auto* cu = dynamic_cast<ConvUnit*>(m.get())) {
        h = cu->eval(h);
        continue;
      }
    }
    h = m->forward(h, training);
  }
  return h;
}

void Network::backward(const Tensor& dlogits) {
  Tensor g = dlogits;
  for (auto it = modules_.rbegin(); it != modules_.rend(); ++it) g = (*it)->backward(g);
}

Tensor Network::forward_bitwise(const Tensor& x) const {
  Tensor h = x;
  for (const auto& m : modules_) h = m->forward_bitwise(h);
  return h;
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (auto& m : modules_) {
    auto p = m->params();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<const Param*> Network::params() const {
  std::vector<const Param*> out;
  for (const auto& m : modules_) {
    for (Param* p : m->params()) out.push_back(p);
  }
  return out;
}

Param* Network::find(const std::string& name) {
  for (Param* p : params()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

void Network::zero_grad() {
  for (Param* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

void Network::set_precision(Precision p) {
  precision_ = p;
  for (auto& m : modules_) m->set_precision(p);
}

void Network::reset_weight_magnitudes() {
  for (auto& m : modules_) {
    if (auto* cu = dynamic_cast<ConvUnit*>(m.get())) cu->reset_weight_magnitudes();
  }
}

void Network::sort_branches() {
  for (auto& m : modules_) {
    if (auto* cu = dynamic_cast<ConvUnit*>(m.get())) cu->sort_branches();
  }
}

void Network::linearize_quantizers(const Tensor& x) {
  clear_linearization();
  std::vector<std::vector<float>> saved;
  for (const Param* p : params()) {
    if (p->kind == ParamKind::Buffer) saved.push_back(p->value);
  }
  Tensor h = x;
  for (auto& m : modules_) {
    if (auto* cu = dynamic_cast<ConvUnit*>(m.get())) cu->set_anchor(h);
    h = m->forward(h, true);
  }
  std::size_t k = 0;
  for (Param* p : params()) {
    if (p->kind == ParamKind::Buffer) p->value = saved[k++];
  }
}

void Network::clear_linearization() {
  for (auto& m : modules_) {
    if (auto* cu = dynamic_cast<ConvUnit*>(m.get())) cu->clear_anchor();
  }
}

std::vector<std::pair<std::string, double>> Network::bn_alpha_max() const {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& m : modules_) {
    if (const auto* cu = dynamic_cast<const ConvUnit*>(m.get())) {
      out.emplace_back(cu->name(), cu->bn_alpha_max());
    }
  }
  return out;
}

std::vector<LayerCost> Network::costs() const {
  std::vector<LayerCost> out;
  Shape s = input_shape(1);
  for (const auto& m : modules_) {
    auto c = m->costs(s);
    out.insert(out.end(), c.begin(), c.end());
    s = m->output_shape(s);
  }
  return out;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t N = logits.shape().n, K = logits.shape().c * logits.shape().plane();
  if (labels.size() != N) throw UsageError("softmax_cross_entropy: label count mismatch");
  LossResult r{0.0, Tensor(logits.shape()), 0};
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw UsageError("label out of range");
    double mx = logits[n * K];
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits[n * K + k] > mx) {
        mx = logits[n * K + k];
        arg = k;
      }
    }
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits[n * K + k] - mx);
    r.loss += -(logits[n * K + y] - mx - std::log(z));
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(logits[n * K + k] - mx) / z;
      r.dlogits[n * K + k] =
          static_cast<float>((p - (k == static_cast<std::size_t>(y) ? 1.0 : 0.0)) /
                             static_cast<double>(N));
    }
    if (arg == static_cast<std::size_t>(y)) r.correct++;
  }
  r.loss /= static_cast<double>(N);
  return r;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string save_checkpoint(const Network& net) {
  std::ostringstream payload(std::ios::binary);
  json entries = json::array();
  for (const Param* p : net.params()) {
    write_tensor(payload, Tensor(p->shape, p->value));
    entries.push_back({{"name", p->name}, {"shape", {p->shape.n, p->shape.c, p->shape.h, p->shape.w}}});
  }
  const std::string body = payload.str();
  json manifest;
  manifest["format"] = "bdnet-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["config"] = json::parse(net.config().to_json());
  manifest["precision"] = to_string(net.precision());
  manifest["entries"] = entries;
  manifest["payload_bytes"] = body.size();
  manifest["checksum"] = fnv1a64(body);
  const std::string m = manifest.dump();

  std::ostringstream os(std::ios::binary);
  os.write("BDCK", 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_u64(os, m.size());
  os << m << body;
  return os.str();
}

Network load_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("checkpoint truncated");
  if (std::string(magic, 4) != "BDCK") throw FormatError("bad checkpoint magic");
  const std::uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t mlen = io::read_u64(is);
  if (mlen > bytes.size()) throw FormatError("checkpoint truncated (manifest)");
  std::string mtext(mlen, '\0');
  if (!is.read(mtext.data(), static_cast<std::streamsize>(mlen))) {
    throw FormatError("checkpoint truncated (manifest)");
  }
  json manifest;
  try {
    manifest = json::parse(mtext);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  const std::size_t offset = 16 + mlen;
  const std::string body = bytes.substr(std::min<std::size_t>(offset, bytes.size()));
  try {
    if (body.size() != manifest.at("payload_bytes").get<std::size_t>()) {
      throw FormatError("checkpoint truncated (payload)");
    }
    if (fnv1a64(body) != manifest.at("checksum").get<std::uint64_t>()) {
      throw FormatError("checkpoint checksum mismatch");
    }
    Network net(ModelConfig::from_json(manifest.at("config").dump()), 0);
    net.set_precision(precision_from_string(manifest.at("precision")));
    std::istringstream ps(body, std::ios::binary);
    std::vector<bool> seen;
    auto params = net.params();
    seen.assign(params.size(), false);
    for (const auto& e : manifest.at("entries")) {
      const std::string name = e.at("name");
      Tensor t = read_tensor(ps);
      auto it = std::find_if(params.begin(), params.end(),
                             [&](const Param* p) { return p->name == name; });
      if (it == params.end()) throw FormatError("checkpoint has unknown entry " + name);
      const std::size_t idx = static_cast<std::size_t>(it - params.begin());
      if (seen[idx]) throw FormatError("checkpoint entry " + name + " appears twice");
      if (t.shape() != (*it)->shape) throw FormatError("checkpoint entry " + name + " has wrong shape");
      seen[idx] = true;
      std::copy(t.data().begin(), t.data().end(), (*it)->value.begin());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!seen[i]) throw FormatError("checkpoint is missing " + params[i]->name);
    }
    return net;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
}

}  // namespace bdnet
