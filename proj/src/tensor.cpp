#include "bdnet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "bdnet/error.hpp"
#include "io_util.hpp"

namespace bdnet {

void Shape::validate() const {
  if (n == 0 || c == 0 || h == 0 || w == 0) {
    throw UsageError("tensor dimensions must be >= 1, got " + str());
  }
}

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
         std::to_string(w);
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape) {
  shape_.validate();
  data_.assign(shape_.size(), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
  shape_.validate();
  if (data_.size() != shape_.size()) {
    throw UsageError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_.str());
  }
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(shape, data_); }

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw UsageError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}
}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  out += b;
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "operator-");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(float s, const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

Tensor& operator+=(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "operator+=");
  auto dst = a.data();
  auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return a;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](float v) { return std::isfinite(v); });
}

void write_tensor(std::ostream& os, const Tensor& t) {
  io::write_header(os, t.shape());
  for (float v : t.data()) io::write_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw FormatError("failed to write tensor");
}

Tensor read_tensor(std::istream& is) {
  const Shape shape = io::read_header(is);
  std::vector<float> data(shape.size());
  for (auto& v : data) v = std::bit_cast<float>(io::read_u32(is));
  return Tensor(shape, std::move(data));
}

}  // namespace bdnet
