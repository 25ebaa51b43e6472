#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "bdnet/tensor.hpp"

namespace bdnet {

/// Bit-packed sign tensor. Each (sample, channel) plane of H*W elements is
/// packed row-major into its own run of 64-bit words; bit 1 is +1, bit 0 is
/// -1. Trailing bits of the last word of a plane are padding and must be
/// ignored by every reduction.
class BitTensor {
 public:
  static constexpr std::size_t kWordBits = 64;

  BitTensor() : BitTensor(Shape{}) {}
  /// All payload bits 0 (all -1).
  explicit BitTensor(Shape shape);
  /// Takes ownership of raw words; size must be n*c*words_per_plane.
  BitTensor(Shape shape, std::vector<std::uint64_t> words);

  const Shape& shape() const { return shape_; }
  std::size_t words_per_plane() const { return words_per_plane_; }
  std::size_t pad_bits() const { return words_per_plane_ * kWordBits - shape_.plane(); }
  /// Mask selecting payload bits of the last word of a plane.
  std::uint64_t tail_mask() const;

  std::span<const std::uint64_t> words() const { return words_; }
  /// Raw mutable access, including pad bits.
  std::span<std::uint64_t> mutable_words() { return words_; }

  std::span<const std::uint64_t> plane(std::size_t n, std::size_t c) const {
    return std::span<const std::uint64_t>(words_).subspan(
        (n * shape_.c + c) * words_per_plane_, words_per_plane_);
  }
  std::span<std::uint64_t> plane(std::size_t n, std::size_t c) {
    return std::span<std::uint64_t>(words_).subspan((n * shape_.c + c) * words_per_plane_,
                                                    words_per_plane_);
  }

  bool bit(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const std::size_t i = h * shape_.w + w;
    return (plane(n, c)[i / kWordBits] >> (i % kWordBits)) & 1u;
  }
  void set_bit(std::size_t n, std::size_t c, std::size_t h, std::size_t w, bool v);

  /// Equality on payload bits only; pad bits are ignored.
  bool same_payload(const BitTensor& other) const;

 private:
  Shape shape_;
  std::size_t words_per_plane_ = 0;
  std::vector<std::uint64_t> words_;
};

/// bit = (t >= threshold[c]); ties map to +1.
BitTensor pack(const Tensor& t, std::span<const float> threshold);
BitTensor pack(const Tensor& t, float threshold = 0.0f);

/// Decodes to {-1, +1}; pad bits are never read.
Tensor unpack(const BitTensor& b);

/// Dot product of the +-1 decodings of two packed sequences holding n
/// elements: 2 * popcount(~(a ^ b) & payload) - n.
std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a,
                               std::span<const std::uint64_t> b, std::size_t n);

void write_bit_tensor(std::ostream& os, const BitTensor& t);
BitTensor read_bit_tensor(std::istream& is);

}  // namespace bdnet
