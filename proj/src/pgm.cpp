#include "bdnet/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "bdnet/error.hpp"

namespace bdnet {

namespace {
// Next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}
}  // namespace

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  if (next_token(is) != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  const std::size_t w = std::stoul(next_token(is));
  const std::size_t h = std::stoul(next_token(is));
  const unsigned long maxval = std::stoul(next_token(is));
  if (w == 0 || h == 0) throw FormatError(path.string() + ": zero image extent");
  if (maxval == 0 || maxval > 255) throw FormatError(path.string() + ": only 8-bit PGM supported");
  std::vector<unsigned char> raw(w * h);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  Tensor out(Shape{1, 1, h, w});
  const float scale = 255.0f / static_cast<float>(maxval);
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = std::round(raw[i] * scale);
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor& gray) {
  const Shape& s = gray.shape();
  if (s.n != 1 || s.c != 1) throw UsageError("write_pgm: expects a 1x1xHxW tensor");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << "P5\n" << s.w << " " << s.h << "\n255\n";
  std::vector<unsigned char> raw(gray.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::clamp(std::lround(gray[i]), 0L, 255L));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw FormatError("failed writing " + path.string());
}

}  // namespace bdnet
