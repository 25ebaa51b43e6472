#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "bdnet/kernels.hpp"
#include "bdnet/tensor.hpp"

namespace testing {

inline bdnet::Tensor random_tensor(bdnet::Shape s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<float> d(0.0f, static_cast<float>(sd));
  bdnet::Tensor t(s);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Values k/8 for integer k in [-16, 16]: exact in float under sums of few terms.
inline bdnet::Tensor dyadic_tensor(bdnet::Shape s, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-16, 16);
  bdnet::Tensor t(s);
  for (auto& v : t.data()) v = static_cast<float>(d(rng)) / 8.0f;
  return t;
}

// Naive grouped cross-correlation with zero padding, accumulated in double.
inline bdnet::Tensor naive_conv(const bdnet::Tensor& x, const bdnet::Tensor& w,
                                const bdnet::ConvSpec& sp) {
  const auto& s = x.shape();
  const std::size_t oh = (s.h + 2 * sp.padding - sp.kh) / sp.stride + 1;
  const std::size_t ow = (s.w + 2 * sp.padding - sp.kw) / sp.stride + 1;
  const std::size_t icg = sp.in_channels / sp.groups, ocg = sp.out_channels / sp.groups;
  bdnet::Tensor y(bdnet::Shape{s.n, sp.out_channels, oh, ow});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t o = 0; o < sp.out_channels; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          const std::size_t g = o / ocg;
          for (std::size_t ci = 0; ci < icg; ++ci)
            for (std::size_t a = 0; a < sp.kh; ++a)
              for (std::size_t b = 0; b < sp.kw; ++b) {
                const long r = static_cast<long>(i * sp.stride + a) - static_cast<long>(sp.padding);
                const long c = static_cast<long>(j * sp.stride + b) - static_cast<long>(sp.padding);
                if (r < 0 || c < 0 || r >= static_cast<long>(s.h) || c >= static_cast<long>(s.w))
                  continue;
                acc += static_cast<double>(x.at(n, g * icg + ci, r, c)) * w.at(o, ci, a, b);
              }
          y.at(n, o, i, j) = static_cast<float>(acc);
        }
  return y;
}

inline double dot(const bdnet::Tensor& a, const bdnet::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Norm-wise relative error ||a - b|| / max(||a||, ||b||, tiny).
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return norm(d) / std::max({norm(a), norm(b), 1e-30});
}

// Central-difference gradient of a scalar function of a float buffer,
// evaluated in double around the current values.
inline std::vector<double> fd_grad(std::vector<float>& p, const std::function<double()>& f,
                                   double h = 1e-2) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float v = p[i];
    const auto up = static_cast<float>(v + h), down = static_cast<float>(v - h);
    p[i] = up;
    const double fp = f();
    p[i] = down;
    const double fm = f();
    p[i] = v;
    g[i] = (fp - fm) / (static_cast<double>(up) - down);
  }
  return g;
}

inline std::vector<double> to_double(std::span<const float> v) {
  return std::vector<double>(v.begin(), v.end());
}

}  // namespace testing
