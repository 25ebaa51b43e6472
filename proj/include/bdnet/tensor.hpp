#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace bdnet {

/// NCHW extents. Every dimension is at least 1.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t plane() const { return h * w; }
  std::size_t size() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;

  /// Throws UsageError if any dimension is zero.
  void validate() const;
  std::string str() const;
};

/// Dense rank-4 float tensor, row-major with width fastest.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  /// Contiguous H*W plane of one (sample, channel).
  std::span<float> plane(std::size_t n, std::size_t c) {
    return std::span<float>(data_).subspan((n * shape_.c + c) * shape_.plane(), shape_.plane());
  }
  std::span<const float> plane(std::size_t n, std::size_t c) const {
    return std::span<const float>(data_).subspan((n * shape_.c + c) * shape_.plane(),
                                                 shape_.plane());
  }

  /// Same data viewed under a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(float s, const Tensor& a);
Tensor& operator+=(Tensor& a, const Tensor& b);

/// Max |a - b| over elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// BDT1 container: "BDT1", four u32 LE extents (N,C,H,W), payload.
// Real tensors carry f32 LE; bit tensors carry their packed u64 LE words.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

}  // namespace bdnet
