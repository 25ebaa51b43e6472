#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "bdnet/tensor.hpp"

namespace bdnet {

/// Learnable sign quantizer: out = +magnitude[c] if x >= threshold[c] else
/// -magnitude[c].
struct BinQuantParams {
  std::vector<float> threshold;
  std::vector<float> magnitude;

  static BinQuantParams uniform(std::size_t channels, float threshold, float magnitude);
  std::size_t channels() const { return threshold.size(); }
  void validate() const;
};

/// Two-boundary quantizer. Its output is the sum of two sign quantizers, so
/// per channel it takes exactly the levels
/// {-beta1-beta2, beta1-beta2, beta1+beta2}.
struct DualQuantParams {
  std::vector<float> alpha1, alpha2;
  std::vector<float> beta1, beta2;

  static DualQuantParams uniform(std::size_t channels, float alpha1, float alpha2, float beta1,
                                 float beta2);
  std::size_t channels() const { return alpha1.size(); }
  /// Throws InvariantError on alpha1 > alpha2 or negative magnitudes.
  void validate() const;
  BinQuantParams first() const { return {alpha1, beta1}; }
  BinQuantParams second() const { return {alpha2, beta2}; }
};

struct EffectiveBits {
  std::size_t n_convs;
  double m_bits;
};

Tensor binarize(const Tensor& x, const BinQuantParams& p);
Tensor ternarize(const Tensor& x, const DualQuantParams& p);

/// Gradients of binarize: the input and threshold get the hard-tanh STE of
/// sign(x - threshold) scaled by the magnitude; the magnitude, which enters
/// linearly, gets sum(upstream * sign(x - threshold)).
struct BinQuantGrads {
  Tensor dx;
  std::vector<double> dthreshold;
  std::vector<double> dmagnitude;
};
BinQuantGrads binarize_backward(const Tensor& x, const BinQuantParams& p, const Tensor& upstream,
                                float clip = 1.0f);

/// log2(n + 1): N parallel binary convs give N + 1 output levels.
double effective_bits(std::size_t n);
EffectiveBits effective_bits_of(std::size_t n);

/// Hard-tanh straight-through estimator: upstream where |x| <= clip, else 0.
Tensor ste_grad_sign(const Tensor& x, const Tensor& upstream, float clip = 1.0f);

/// Otsu's threshold over a 256-bin histogram. Class 0 is bins [0, t) and
/// class 1 is [t, 255]; the smallest maximizing t is returned.
int otsu_threshold(std::span<const std::uint64_t> histogram);

/// Two thresholds (t1 <= t2) maximizing three-class between-class variance.
std::array<int, 2> otsu_two_thresholds(std::span<const std::uint64_t> histogram);

std::array<std::uint64_t, 256> histogram256(const Tensor& gray);

/// Two-level image: 255 where gray >= t, else 0.
Tensor binarize_image(const Tensor& gray, int t);

/// Three-level image: gray < t1 -> 0, t1 <= gray < t2 -> 128, else 255.
Tensor ternarize_image(const Tensor& gray, int t1, int t2);

}  // namespace bdnet
