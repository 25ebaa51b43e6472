#include <bit>
#include <cstring>
#include <random>
#include <sstream>

#include "bdnet/bit_tensor.hpp"
#include "bdnet/error.hpp"
#include "bdnet/tensor.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bdnet;

TEST_CASE("shape validation rejects zero extents") {
  CHECK_THROWS_AS(Tensor(Shape{1, 0, 2, 2}), UsageError);
  CHECK_THROWS_AS(Tensor(Shape{1, 1, 2, 2}, std::vector<float>(3)), UsageError);
  CHECK_NOTHROW(Tensor(Shape{2, 3, 4, 5}));
}

TEST_CASE("tensor arithmetic is elementwise and checks shapes") {
  Tensor a(Shape{1, 1, 1, 3}, {1, 2, 3});
  Tensor b(Shape{1, 1, 1, 3}, {4, 5, 6});
  CHECK((a + b) == Tensor(Shape{1, 1, 1, 3}, {5, 7, 9}));
  CHECK((b - a) == Tensor(Shape{1, 1, 1, 3}, {3, 3, 3}));
  CHECK((2.0f * a) == Tensor(Shape{1, 1, 1, 3}, {2, 4, 6}));
  CHECK(max_abs_diff(a, b) == 3.0);
  CHECK_THROWS_AS(a + Tensor(Shape{1, 1, 3, 1}), UsageError);
  CHECK(a.reshaped(Shape{1, 3, 1, 1})[2] == 3.0f);
  CHECK_THROWS_AS(a.reshaped(Shape{1, 2, 1, 1}), UsageError);
}

TEST_CASE("tensor container round-trips bit-exactly") {
  std::mt19937_64 rng(1);
  const Tensor t = testing::random_tensor({2, 3, 4, 5}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "BDT1");
  CHECK(bytes.size() == 4 + 16 + 4 * t.size());
  // little-endian extents
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);
  CHECK(static_cast<unsigned char>(bytes[8]) == 3);
  std::uint32_t first = 0;
  std::memcpy(&first, bytes.data() + 20, 4);
  CHECK(std::bit_cast<float>(first) == t[0]);
  std::stringstream in(bytes);
  CHECK(read_tensor(in) == t);
}

TEST_CASE("tensor container rejects bad magic and truncation") {
  std::mt19937_64 rng(2);
  std::stringstream ss;
  write_tensor(ss, testing::random_tensor({1, 1, 2, 2}, rng));
  std::string bytes = ss.str();
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream a(bad);
  CHECK_THROWS_AS(read_tensor(a), FormatError);
  std::stringstream b(bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(read_tensor(b), FormatError);
}

TEST_CASE("pack maps ties to +1") {
  const Tensor t(Shape{1, 1, 1, 3}, {-2, 0, 3});
  const BitTensor b = pack(t);
  CHECK_FALSE(b.bit(0, 0, 0, 0));
  CHECK(b.bit(0, 0, 0, 1));
  CHECK(b.bit(0, 0, 0, 2));
  CHECK(b.words()[0] == 0b110u);
}

TEST_CASE("pack of all +1 gives all-ones payload with zero pad bits") {
  const Tensor t(Shape{1, 2, 3, 5}, 1.0f);
  const BitTensor b = pack(t);
  CHECK(b.words_per_plane() == 1);
  CHECK(b.pad_bits() == 64 - 15);
  for (auto w : b.words()) CHECK(w == (std::uint64_t{1} << 15) - 1);
}

TEST_CASE("pack uses per-channel thresholds") {
  const Tensor t(Shape{1, 2, 1, 2}, {0.5f, 1.5f, 0.5f, 1.5f});
  const std::vector<float> th = {1.0f, 0.0f};
  const Tensor u = unpack(pack(t, th));
  CHECK(u == Tensor(Shape{1, 2, 1, 2}, {-1, 1, 1, 1}));
  CHECK_THROWS_AS(pack(t, std::vector<float>{1.0f}), UsageError);
}

TEST_CASE("unpack of pack is the elementwise sign") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s{1 + dim(rng) % 4, dim(rng), dim(rng), dim(rng)};
    const Tensor t = testing::random_tensor(s, rng);
    const Tensor u = unpack(pack(t));
    for (std::size_t i = 0; i < t.size(); ++i) {
      REQUIRE(u[i] == (t[i] >= 0.0f ? 1.0f : -1.0f));
    }
  }
  CHECK(unpack(pack(Tensor(Shape{1, 1, 7, 9}, 1.0f))) == Tensor(Shape{1, 1, 7, 9}, 1.0f));
}

TEST_CASE("unpack of all-zero words is all -1 and ignores pad bits") {
  BitTensor b(Shape{1, 2, 3, 3});
  CHECK(unpack(b) == Tensor(Shape{1, 2, 3, 3}, -1.0f));
  for (auto& w : b.mutable_words()) w = ~b.tail_mask();
  CHECK(unpack(b) == Tensor(Shape{1, 2, 3, 3}, -1.0f));
}

TEST_CASE("pack of unpack reproduces random bit tensors") {
  std::mt19937_64 rng(4);
  BitTensor b(Shape{2, 3, 9, 11});
  for (auto& w : b.mutable_words()) w = rng() & b.tail_mask();
  CHECK(pack(unpack(b)).same_payload(b));
  const BitTensor back = pack(unpack(b));
  CHECK(std::equal(back.words().begin(), back.words().end(), b.words().begin()));
}

TEST_CASE("multi-word planes pack row-major") {
  std::mt19937_64 rng(5);
  const Tensor t = testing::random_tensor({1, 1, 13, 11}, rng);
  const BitTensor b = pack(t);
  CHECK(b.words_per_plane() == 3);
  for (std::size_t h = 0; h < 13; ++h)
    for (std::size_t w = 0; w < 11; ++w) CHECK(b.bit(0, 0, h, w) == (t.at(0, 0, h, w) >= 0.0f));
}

namespace {

std::vector<std::uint64_t> encode(const std::vector<int>& v) {
  std::vector<std::uint64_t> w((v.size() + 63) / 64, 0);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] > 0) w[i / 64] |= std::uint64_t{1} << (i % 64);
  return w;
}

}  // namespace

TEST_CASE("xnor popcount dot on hand cases") {
  CHECK(xnor_popcount_dot(encode({1, 1, -1, -1}), encode({1, -1, -1, 1}), 4) == 0);
  std::vector<int> v(100);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 3 ? 1 : -1;
  CHECK(xnor_popcount_dot(encode(v), encode(v), 100) == 100);
  CHECK_THROWS_AS(xnor_popcount_dot(encode(v), encode(v), 130), UsageError);
}

TEST_CASE("xnor popcount dot is exhaustive-exact for n <= 12") {
  for (std::size_t n = 1; n <= 12; ++n) {
    for (std::uint64_t a = 0; a < (1u << n); a += (n > 8 ? 7 : 1)) {
      for (std::uint64_t b = 0; b < (1u << n); b += (n > 8 ? 5 : 1)) {
        long expect = 0;
        for (std::size_t i = 0; i < n; ++i) {
          expect += (((a >> i) & 1) ? 1 : -1) * (((b >> i) & 1) ? 1 : -1);
        }
        const std::vector<std::uint64_t> wa = {a}, wb = {b};
        REQUIRE(xnor_popcount_dot(wa, wb, n) == expect);
      }
    }
  }
}

TEST_CASE("xnor popcount dot equals the float dot of decodings") {
  std::mt19937_64 rng(6);
  for (std::size_t n : {63u, 64u, 65u, 128u, 200u, 777u}) {
    std::vector<int> a(n), b(n);
    for (auto& v : a) v = rng() & 1 ? 1 : -1;
    for (auto& v : b) v = rng() & 1 ? 1 : -1;
    double expect = 0.0;
    for (std::size_t i = 0; i < n; ++i) expect += static_cast<double>(a[i]) * b[i];
    auto wa = encode(a), wb = encode(b);
    CHECK(static_cast<double>(xnor_popcount_dot(wa, wb, n)) == expect);
    // pad bits never leak into the result
    if (n % 64) {
      wa.back() |= ~((std::uint64_t{1} << (n % 64)) - 1);
      CHECK(static_cast<double>(xnor_popcount_dot(wa, wb, n)) == expect);
    }
  }
}

TEST_CASE("bit tensor container round-trips and zeroes pad bits") {
  std::mt19937_64 rng(7);
  BitTensor b(Shape{2, 2, 5, 5});
  for (auto& w : b.mutable_words()) w = rng();
  std::stringstream ss;
  write_bit_tensor(ss, b);
  CHECK(ss.str().substr(0, 4) == "BDT1");
  const BitTensor r = read_bit_tensor(ss);
  CHECK(r.same_payload(b));
  for (auto w : r.words()) CHECK((w & ~r.tail_mask()) == 0);
}
