#include "bdnet/verify.hpp"

#include <algorithm>
#include <array>
#include <ostream>
#include <random>

namespace bdnet {

std::size_t VerifyReport::count(const std::string& variant) const {
  return static_cast<std::size_t>(std::count_if(
      cases.begin(), cases.end(), [&](const VerifyCase& c) { return c.variant == variant; }));
}

std::size_t VerifyReport::failures_of(const std::string& variant) const {
  return static_cast<std::size_t>(std::count_if(cases.begin(), cases.end(), [&](const VerifyCase& c) {
    return c.variant == variant && !c.exact;
  }));
}

namespace {

using Rng = std::mt19937_64;

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Multiples of 1/4 in [-2, 2]: collide with thresholds often enough to
// exercise the tie rule.
float grid_value(Rng& rng) { return static_cast<float>(static_cast<int>(uniform(rng, 0, 16)) - 8) / 4.0f; }

float magnitude(Rng& rng) { return static_cast<float>(uniform(rng, 1, 32)) / 16.0f; }

Tensor grid_tensor(Shape s, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.data()) v = grid_value(rng);
  return t;
}

std::vector<float> vec(std::size_t n, Rng& rng, float (*draw)(Rng&)) {
  std::vector<float> v(n);
  for (auto& x : v) x = draw(rng);
  return v;
}

BinaryConvWeights weights(const ConvSpec& spec, Rng& rng) {
  return BinaryConvWeights::from_real(grid_tensor(spec.weight_shape(), rng),
                                      vec(spec.out_channels, rng, magnitude));
}

// Random geometry whose window always fits the padded input.
std::pair<Shape, ConvSpec> geometry(bool depthwise, Rng& rng) {
  const std::size_t k = std::array<std::size_t, 3>{1, 3, 5}[uniform(rng, 0, 2)];
  const std::size_t stride = uniform(rng, 1, 2);
  const std::size_t pad = uniform(rng, 0, k / 2);
  const std::size_t lo = k > 2 * pad ? k - 2 * pad : 1;
  // Occasionally wide enough to span several 64-column blocks.
  const std::size_t wmax = uniform(rng, 0, 9) == 0 ? 140 : 24;
  Shape in{uniform(rng, 1, 2), 0, uniform(rng, lo, 20), uniform(rng, lo, wmax)};
  ConvSpec spec;
  if (depthwise) {
    in.c = uniform(rng, 1, 12);
    spec = ConvSpec::depthwise(in.c, k, stride, pad);
  } else {
    in.c = uniform(rng, 0, 3) == 0 ? uniform(rng, 60, 140) : uniform(rng, 1, 24);
    spec = ConvSpec::regular(in.c, uniform(rng, 1, 8), k, stride, pad);
    if (in.c > 24) in.h = std::min<std::size_t>(in.h, 8), in.w = std::min<std::size_t>(in.w, 12);
  }
  return {in, spec};
}

VerifyCase run_case(const std::string& variant, Rng& rng, PadValue pad) {
  const bool regular = variant == "binary_regular";
  auto [in, spec] = geometry(!regular, rng);
  const Tensor x = grid_tensor(in, rng);
  Tensor got, want;
  if (variant == "binary_regular" || variant == "binary_dw") {
    const BitTensor xb = pack(x, vec(in.c, rng, grid_value));
    const BinaryConvWeights w = weights(spec, rng);
    got = conv_binary(xb, w, spec, pad);
    want = reference::conv_binary(xb, w, spec);
  } else if (variant == "dual_dw") {
    const BinaryConvWeights w1 = weights(spec, rng), w2 = weights(spec, rng);
    DualQuantParams q{vec(in.c, rng, grid_value), vec(in.c, rng, grid_value),
                      vec(in.c, rng, magnitude), vec(in.c, rng, magnitude)};
    for (std::size_t c = 0; c < in.c; ++c) {
      if (q.alpha1[c] > q.alpha2[c]) std::swap(q.alpha1[c], q.alpha2[c]);
    }
    got = conv_dual_dw(x, w1, w2, q, spec, pad);
    const BinaryBranch b[2] = {{w1, q.alpha1, q.beta1}, {w2, q.alpha2, q.beta2}};
    want = reference::conv_multi_dw(x, b, spec);
  } else {
    const std::size_t n = static_cast<std::size_t>(variant.back() - '0');
    std::vector<BinaryBranch> branches;
    for (std::size_t i = 0; i < n; ++i) {
      branches.push_back({weights(spec, rng), vec(in.c, rng, grid_value), vec(in.c, rng, magnitude)});
    }
    got = conv_multi_dw(x, branches, spec, pad);
    want = reference::conv_multi_dw(x, branches, spec);
  }
  VerifyCase c{variant, in, spec, false, 0.0};
  c.max_diff = max_abs_diff(got, want);
  c.exact = got == want;
  return c;
}

}  // namespace

VerifyReport verify_kernels(std::size_t cases_per_variant, std::uint64_t seed, PadValue pad) {
  VerifyReport r;
  Rng rng(seed);
  for (const auto& v : verify_variants()) {
    for (std::size_t i = 0; i < cases_per_variant; ++i) {
      r.cases.push_back(run_case(v, rng, pad));
      if (!r.cases.back().exact) ++r.failures;
    }
  }
  return r;
}

void write_verify_csv(std::ostream& os, const VerifyReport& r) {
  os << "variant,input,out_channels,kernel,stride,padding,exact,max_diff\n";
  for (const auto& c : r.cases) {
    os << c.variant << ',' << c.input.n << 'x' << c.input.c << 'x' << c.input.h << 'x' << c.input.w
       << ',' << c.spec.out_channels << ',' << c.spec.kh << 'x' << c.spec.kw << ',' << c.spec.stride
       << ',' << c.spec.padding << ',' << (c.exact ? 1 : 0) << ',' << c.max_diff << '\n';
  }
}

}  // namespace bdnet
