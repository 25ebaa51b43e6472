#include <random>
#include <set>

#include "bdnet/error.hpp"
#include "bdnet/kernels.hpp"
#include "bdnet/parallel.hpp"
#include "bdnet/verify.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bdnet;

namespace {

BinaryConvWeights random_binary(const Shape& s, std::mt19937_64& rng) {
  const Tensor w = testing::random_tensor(s, rng);
  std::vector<float> mag(s.n);
  std::uniform_int_distribution<int> d(1, 8);
  for (auto& m : mag) m = static_cast<float>(d(rng)) / 4.0f;
  return BinaryConvWeights::from_real(w, mag);
}

}  // namespace

TEST_CASE("conv spec geometry and validation") {
  const ConvSpec s = ConvSpec::regular(4, 8, 3, 2, 1);
  CHECK(s.output_shape({2, 4, 9, 9}) == Shape{2, 8, 5, 5});
  CHECK(ConvSpec::depthwise(6, 3, 1, 0).is_depthwise());
  CHECK_THROWS_AS((ConvSpec{4, 6, 3, 3, 1, 0, 4}.validate()), UsageError);
  CHECK_THROWS_AS(s.validate_input({1, 3, 9, 9}), UsageError);
  CHECK_THROWS_AS(ConvSpec::regular(1, 1, 5, 1, 0).validate_input({1, 1, 3, 3}), UsageError);
}

TEST_CASE("float conv hand cases") {
  const ConvSpec s = ConvSpec::regular(1, 1, 3, 1, 1);
  const Tensor y = conv_float(Tensor(Shape{1, 1, 3, 3}, 1.0f), Tensor(Shape{1, 1, 3, 3}, 1.0f), s);
  CHECK(y.at(0, 0, 1, 1) == 9.0f);
  CHECK(y.at(0, 0, 0, 0) == 4.0f);
  CHECK(y.at(0, 0, 0, 1) == 6.0f);
  std::mt19937_64 rng(21);
  const Tensor x = testing::random_tensor({2, 1, 5, 6}, rng);
  Tensor delta(Shape{1, 1, 3, 3});
  delta.at(0, 0, 1, 1) = 1.0f;
  CHECK(conv_float(x, delta, s) == x);
  CHECK_THROWS_AS(conv_float(x, Tensor(Shape{1, 2, 3, 3}), s), UsageError);
}

TEST_CASE("float conv and its reference match the naive oracle") {
  std::mt19937_64 rng(22);
  const std::vector<ConvSpec> specs = {
      ConvSpec::regular(3, 5, 3, 1, 1), ConvSpec::regular(4, 2, 3, 2, 1),
      ConvSpec::regular(6, 4, 1, 1, 0), ConvSpec::depthwise(5, 3, 1, 1),
      ConvSpec::depthwise(4, 3, 2, 0), ConvSpec{4, 6, 3, 3, 1, 1, 2}};
  for (const auto& s : specs) {
    const Tensor x = testing::random_tensor({2, s.in_channels, 7, 8}, rng);
    const Tensor w = testing::random_tensor(s.weight_shape(), rng);
    const Tensor oracle = testing::naive_conv(x, w, s);
    CHECK(max_abs_diff(conv_float(x, w, s), oracle) < 1e-5);
    CHECK(max_abs_diff(reference::conv_float(x, w, s), oracle) < 1e-5);
  }
}

TEST_CASE("parallel float conv is independent of the thread count") {
  std::mt19937_64 rng(23);
  const ConvSpec s = ConvSpec::regular(8, 8, 3, 1, 1);
  const Tensor x = testing::random_tensor({3, 8, 10, 10}, rng);
  const Tensor w = testing::random_tensor(s.weight_shape(), rng);
  Tensor one;
  {
    ThreadLimit t(1);
    one = conv_float(x, w, s);
  }
  ThreadLimit t(4);
  CHECK(conv_float(x, w, s) == one);
}

TEST_CASE("binary conv hand cases") {
  const ConvSpec s = ConvSpec::depthwise(2, 3, 1, 0);
  const BinaryConvWeights w = BinaryConvWeights::from_real(Tensor(Shape{2, 1, 3, 3}, 1.0f), {0.5f, 2.0f});
  const Tensor y = conv_binary(pack(Tensor(Shape{1, 2, 5, 5}, 1.0f)), w, s);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(y.plane(0, 0)[i] == 4.5f);
    CHECK(y.plane(0, 1)[i] == 18.0f);
  }
  // filter equal to the decoded window agrees everywhere
  std::mt19937_64 rng(24);
  const Tensor x = testing::random_tensor({1, 1, 3, 3}, rng);
  const BinaryConvWeights wx = BinaryConvWeights::from_real(x, {1.0f});
  CHECK(conv_binary(pack(x), wx, ConvSpec::depthwise(1, 3, 1, 0))[0] == 9.0f);
  CHECK_THROWS_AS(conv_binary(pack(Tensor(Shape{1, 4, 5, 5})), random_binary({4, 2, 3, 3}, rng),
                              ConvSpec{4, 4, 3, 3, 1, 0, 2}),
                  UsageError);
}

TEST_CASE("binary conv is bit-exact against the float conv of decodings") {
  std::mt19937_64 rng(25);
  struct Case {
    Shape in;
    ConvSpec spec;
  };
  const std::vector<Case> cases = {
      {{2, 8, 10, 10}, ConvSpec::depthwise(8, 3, 2, 1)},
      {{1, 5, 12, 9}, ConvSpec::depthwise(5, 3, 1, 1)},
      {{2, 7, 9, 11}, ConvSpec::regular(7, 6, 3, 1, 1)},
      {{1, 70, 6, 6}, ConvSpec::regular(70, 4, 3, 2, 1)},
      {{1, 3, 8, 8}, ConvSpec::regular(3, 5, 1, 1, 0)},
  };
  for (const auto& c : cases) {
    const BitTensor xb = pack(testing::random_tensor(c.in, rng));
    const BinaryConvWeights w = random_binary(c.spec.weight_shape(), rng);
    const Tensor oracle = testing::naive_conv(unpack(xb), w.decoded(), c.spec);
    CHECK(conv_binary(xb, w, c.spec) == oracle);
    CHECK(reference::conv_binary(xb, w, c.spec) == oracle);
  }
}

TEST_CASE("binary padding contributes zero, one-padding differs") {
  std::mt19937_64 rng(26);
  const ConvSpec s = ConvSpec::depthwise(3, 3, 1, 1);
  const BitTensor xb = pack(testing::random_tensor({1, 3, 6, 6}, rng));
  const BinaryConvWeights w = random_binary(s.weight_shape(), rng);
  const Tensor zero = conv_binary(xb, w, s, PadValue::Zero);
  const Tensor ones = conv_binary(xb, w, s, PadValue::MinusOne);
  CHECK(zero == testing::naive_conv(unpack(xb), w.decoded(), s));
  CHECK(ones == reference::conv_binary(xb, w, s, PadValue::MinusOne));
  CHECK_FALSE(zero == ones);
  // interior outputs never touch padding
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 1; i < 5; ++i)
      for (std::size_t j = 1; j < 5; ++j) CHECK(zero.at(0, c, i, j) == ones.at(0, c, i, j));
}

TEST_CASE("dual depth-wise conv") {
  std::mt19937_64 rng(27);
  const ConvSpec s = ConvSpec::depthwise(4, 3, 1, 1);
  const Tensor x = testing::dyadic_tensor({2, 4, 7, 7}, rng);
  const BinaryConvWeights w1 = random_binary(s.weight_shape(), rng);
  const BinaryConvWeights w2 = random_binary(s.weight_shape(), rng);
  const DualQuantParams q{{-0.5f, -0.25f, 0.0f, -1.0f}, {0.5f, 0.25f, 0.0f, 1.0f},
                          {0.5f, 1.0f, 0.25f, 0.75f}, {0.25f, 0.5f, 1.0f, 0.5f}};

  SUBCASE("sum of two independent float oracles") {
    const Tensor b1 = testing::naive_conv(binarize(x, q.first()), w1.decoded(), s);
    const Tensor b2 = testing::naive_conv(binarize(x, q.second()), w2.decoded(), s);
    CHECK(conv_dual_dw(x, w1, w2, q, s) == b1 + b2);
  }
  SUBCASE("zero second branch degenerates to a single binary conv") {
    DualQuantParams q0 = q;
    q0.beta2.assign(4, 0.0f);
    Tensor single = conv_binary(pack(x, q.alpha1), w1, s);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 4; ++c)
        for (auto& v : single.plane(n, c)) v *= q.beta1[c];
    CHECK(conv_dual_dw(x, w1, w2, q0, s) == single);
  }
  SUBCASE("1x1 kernel equals ternarize times the shared weight sign") {
    const ConvSpec p = ConvSpec::depthwise(4, 1, 1, 0);
    const Tensor wr = testing::random_tensor(p.weight_shape(), rng);
    const BinaryConvWeights w = BinaryConvWeights::from_real(wr, std::vector<float>(4, 1.0f));
    const Tensor t = ternarize(x, q);
    const Tensor y = conv_dual_dw(x, w, w, q, p);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 4; ++c) {
        const float sgn = wr[c] >= 0.0f ? 1.0f : -1.0f;
        for (std::size_t i = 0; i < 49; ++i) CHECK(y.plane(n, c)[i] == t.plane(n, c)[i] * sgn);
      }
  }
  SUBCASE("geometry errors") {
    CHECK_THROWS_AS(conv_dual_dw(x, w1, random_binary({4, 1, 1, 1}, rng), q, s), UsageError);
    CHECK_THROWS_AS(conv_dual_dw(x, w1, w2, q, ConvSpec::regular(4, 4, 3, 1, 1)), UsageError);
  }
}

TEST_CASE("multi depth-wise conv") {
  std::mt19937_64 rng(28);
  const ConvSpec s = ConvSpec::depthwise(3, 3, 2, 1);
  const Tensor x = testing::dyadic_tensor({1, 3, 9, 8}, rng);
  std::vector<BinaryBranch> br;
  for (int i = 0; i < 4; ++i) {
    br.push_back({random_binary(s.weight_shape(), rng),
                  {-0.5f + 0.25f * i, 0.25f * i, 0.125f * i},
                  {0.25f * (i + 1), 0.5f, 0.125f * (i + 1)}});
  }
  Tensor oracle(s.output_shape(x.shape()));
  for (std::size_t n = 1; n <= 4; ++n) {
    const BinaryBranch& b = br[n - 1];
    oracle += testing::naive_conv(binarize(x, {b.threshold, b.magnitude}), b.weights.decoded(), s);
    const std::span<const BinaryBranch> sub(br.data(), n);
    CHECK(conv_multi_dw(x, sub, s) == oracle);
    CHECK(reference::conv_multi_dw(x, sub, s) == oracle);
  }
  // N = 1 equals a scaled single binary conv
  Tensor single = conv_binary(pack(x, br[0].threshold), br[0].weights, s);
  for (std::size_t c = 0; c < 3; ++c)
    for (auto& v : single.plane(0, c)) v *= br[0].magnitude[c];
  CHECK(conv_multi_dw(x, std::span<const BinaryBranch>(br.data(), 1), s) == single);
  // N = 2 equals the dual conv
  const DualQuantParams q{br[0].threshold, br[1].threshold, br[0].magnitude, br[1].magnitude};
  CHECK(conv_multi_dw(x, std::span<const BinaryBranch>(br.data(), 2), s) ==
        conv_dual_dw(x, br[0].weights, br[1].weights, q, s));
  CHECK_THROWS_AS(conv_multi_dw(x, std::span<const BinaryBranch>(), s), UsageError);
  std::vector<BinaryBranch> five(br);
  five.push_back(br[0]);
  CHECK_THROWS_AS(conv_multi_dw(x, five, s), UsageError);
}

TEST_CASE("binary depth-wise output level counts") {
  // all 2^9 activation windows against one fixed filter: at most 10 values
  const ConvSpec s = ConvSpec::depthwise(1, 3, 1, 0);
  std::mt19937_64 rng(29);
  const BinaryConvWeights w = BinaryConvWeights::from_real(testing::random_tensor({1, 1, 3, 3}, rng), {1.0f});
  const BinaryConvWeights w2 = BinaryConvWeights::from_real(testing::random_tensor({1, 1, 3, 3}, rng), {1.0f});
  std::set<float> single, dual;
  for (unsigned a = 0; a < 512; ++a) {
    Tensor x(Shape{1, 1, 3, 3});
    for (unsigned i = 0; i < 9; ++i) x[i] = (a >> i) & 1 ? 1.0f : -1.0f;
    single.insert(conv_binary(pack(x), w, s)[0]);
    for (unsigned b = 0; b < 512; b += 37) {
      Tensor x2(Shape{1, 1, 3, 3});
      for (unsigned i = 0; i < 9; ++i) x2[i] = (b >> i) & 1 ? 1.0f : -1.0f;
      dual.insert(conv_binary(pack(x), w, s)[0] + 0.5f * conv_binary(pack(x2), w2, s)[0]);
    }
  }
  CHECK(single.size() == 10);
  CHECK(dual.size() <= 100);
  CHECK(dual.size() > single.size());
}

TEST_CASE("there are exactly 2^9 distinct binary 3x3 filters") {
  std::set<std::uint64_t> filters;
  for (unsigned a = 0; a < 4096; ++a) {
    Tensor w(Shape{1, 1, 3, 3});
    for (unsigned i = 0; i < 9; ++i) w[i] = (a >> i) & 1 ? 1.0f : -1.0f;
    filters.insert(BinaryConvWeights::from_real(w).packed.words()[0]);
  }
  CHECK(filters.size() == 512);
}

TEST_CASE("binary weights decode to magnitude times sign") {
  std::mt19937_64 rng(30);
  const Tensor w = testing::random_tensor({3, 2, 3, 3}, rng);
  const BinaryConvWeights b = BinaryConvWeights::from_real(w);
  const Tensor d = b.decoded();
  for (std::size_t o = 0; o < 3; ++o) {
    double m = 0.0;
    for (std::size_t i = 0; i < 18; ++i) m += std::abs(w[o * 18 + i]);
    CHECK(b.magnitude[o] == doctest::Approx(m / 18.0).epsilon(1e-6));
    for (std::size_t i = 0; i < 18; ++i)
      CHECK(d[o * 18 + i] == (w[o * 18 + i] >= 0.0f ? b.magnitude[o] : -b.magnitude[o]));
  }
}

TEST_CASE("verify suite enumerates every variant and passes") {
  const VerifyReport r = verify_kernels(25, 31);
  CHECK(r.failures == 0);
  for (const auto& v : verify_variants()) CHECK(r.count(v) == 25);
  for (const auto& c : r.cases) {
    CHECK(c.exact);
    CHECK(c.input.c <= 140);
    CHECK(c.input.h <= 20);
    CHECK(c.input.w <= 140);
  }
  const VerifyReport bad = verify_kernels(25, 31, PadValue::MinusOne);
  CHECK(bad.failures > 0);
}
