#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "bdnet/error.hpp"
#include "bdnet/tensor.hpp"

// Little-endian primitives shared by the BDT1 tensor container and the
// checkpoint format.
namespace bdnet::io {

inline constexpr std::array<char, 4> kTensorMagic = {'B', 'D', 'T', '1'};

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated payload");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated payload");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_header(std::ostream& os, const Shape& s) {
  os.write(kTensorMagic.data(), 4);
  for (std::size_t d : {s.n, s.c, s.h, s.w}) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw UsageError("tensor extent exceeds 32 bits");
    }
    write_u32(os, static_cast<std::uint32_t>(d));
  }
}

inline Shape read_header(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated tensor header");
  if (std::string(magic, 4) != std::string(kTensorMagic.data(), 4)) {
    throw FormatError("bad tensor magic (expected BDT1)");
  }
  Shape s;
  s.n = read_u32(is);
  s.c = read_u32(is);
  s.h = read_u32(is);
  s.w = read_u32(is);
  if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
    throw FormatError("tensor header has a zero extent");
  }
  return s;
}

}  // namespace bdnet::io
