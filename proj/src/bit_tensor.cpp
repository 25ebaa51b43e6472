#include "bdnet/bit_tensor.hpp"

#include <algorithm>
#include <bit>

#include "bdnet/error.hpp"
#include "io_util.hpp"

namespace bdnet {

namespace {
std::size_t words_for(std::size_t bits) {
  return (bits + BitTensor::kWordBits - 1) / BitTensor::kWordBits;
}
}  // namespace

BitTensor::BitTensor(Shape shape) : shape_(shape) {
  shape_.validate();
  words_per_plane_ = words_for(shape_.plane());
  words_.assign(shape_.n * shape_.c * words_per_plane_, 0);
}

BitTensor::BitTensor(Shape shape, std::vector<std::uint64_t> words)
    : shape_(shape), words_(std::move(words)) {
  shape_.validate();
  words_per_plane_ = words_for(shape_.plane());
  if (words_.size() != shape_.n * shape_.c * words_per_plane_) {
    throw UsageError("bit tensor word count does not match shape " + shape_.str());
  }
}

std::uint64_t BitTensor::tail_mask() const {
  const std::size_t used = shape_.plane() % kWordBits;
  return used == 0 ? ~std::uint64_t{0} : (std::uint64_t{1} << used) - 1;
}

void BitTensor::set_bit(std::size_t n, std::size_t c, std::size_t h, std::size_t w, bool v) {
  const std::size_t i = h * shape_.w + w;
  std::uint64_t& word = plane(n, c)[i / kWordBits];
  const std::uint64_t m = std::uint64_t{1} << (i % kWordBits);
  word = v ? (word | m) : (word & ~m);
}

bool BitTensor::same_payload(const BitTensor& other) const {
  if (shape_ != other.shape_) return false;
  const std::uint64_t tail = tail_mask();
  for (std::size_t p = 0; p < shape_.n * shape_.c; ++p) {
    const std::size_t base = p * words_per_plane_;
    for (std::size_t k = 0; k < words_per_plane_; ++k) {
      const std::uint64_t m = (k + 1 == words_per_plane_) ? tail : ~std::uint64_t{0};
      if ((words_[base + k] ^ other.words_[base + k]) & m) return false;
    }
  }
  return true;
}

BitTensor pack(const Tensor& t, std::span<const float> threshold) {
  const Shape& s = t.shape();
  if (threshold.size() != s.c) {
    throw UsageError("pack: expected " + std::to_string(s.c) + " thresholds, got " +
                     std::to_string(threshold.size()));
  }
  BitTensor out(s);
  const std::size_t plane = s.plane();
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = t.plane(n, c);
      auto dst = out.plane(n, c);
      const float th = threshold[c];
      for (std::size_t k = 0; k < dst.size(); ++k) {
        const std::size_t begin = k * BitTensor::kWordBits;
        const std::size_t end = std::min(plane, begin + BitTensor::kWordBits);
        std::uint64_t word = 0;
        for (std::size_t i = begin; i < end; ++i) {
          word |= static_cast<std::uint64_t>(src[i] >= th) << (i - begin);
        }
        dst[k] = word;
      }
    }
  }
  return out;
}

BitTensor pack(const Tensor& t, float threshold) {
  std::vector<float> th(t.shape().c, threshold);
  return pack(t, th);
}

Tensor unpack(const BitTensor& b) {
  const Shape& s = b.shape();
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = b.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t i = 0; i < dst.size(); ++i) {
        const bool bit = (src[i / BitTensor::kWordBits] >> (i % BitTensor::kWordBits)) & 1u;
        dst[i] = bit ? 1.0f : -1.0f;
      }
    }
  }
  return out;
}

std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a,
                               std::span<const std::uint64_t> b, std::size_t n) {
  const std::size_t nwords = (n + BitTensor::kWordBits - 1) / BitTensor::kWordBits;
  if (a.size() != nwords || b.size() != nwords) {
    throw UsageError("xnor_popcount_dot: " + std::to_string(n) + " elements need " +
                     std::to_string(nwords) + " words, got " + std::to_string(a.size()) +
                     " and " + std::to_string(b.size()));
  }
  if (n == 0) return 0;
  std::int64_t agree = 0;
  for (std::size_t k = 0; k + 1 < nwords; ++k) agree += std::popcount(~(a[k] ^ b[k]));
  const std::size_t used = n - (nwords - 1) * BitTensor::kWordBits;
  const std::uint64_t mask =
      used == BitTensor::kWordBits ? ~std::uint64_t{0} : (std::uint64_t{1} << used) - 1;
  agree += std::popcount(~(a[nwords - 1] ^ b[nwords - 1]) & mask);
  return 2 * agree - static_cast<std::int64_t>(n);
}

void write_bit_tensor(std::ostream& os, const BitTensor& t) {
  io::write_header(os, t.shape());
  const std::uint64_t tail = t.tail_mask();
  const std::size_t wpp = t.words_per_plane();
  auto words = t.words();
  for (std::size_t i = 0; i < words.size(); ++i) {
    // Pad bits are written as zero regardless of in-memory state.
    io::write_u64(os, (i % wpp == wpp - 1) ? (words[i] & tail) : words[i]);
  }
  if (!os) throw FormatError("failed to write bit tensor");
}

BitTensor read_bit_tensor(std::istream& is) {
  const Shape shape = io::read_header(is);
  BitTensor out(shape);
  for (auto& w : out.mutable_words()) w = io::read_u64(is);
  return out;
}

}  // namespace bdnet
