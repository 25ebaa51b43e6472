#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bdnet/bit_tensor.hpp"
#include "bdnet/quantize.hpp"
#include "bdnet/tensor.hpp"

namespace bdnet {

/// Geometry of a 2-D convolution. Depth-wise means
/// groups == in_channels == out_channels.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kh = 3;
  std::size_t kw = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  static ConvSpec regular(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          std::size_t pad) {
    return {in, out, k, k, stride, pad, 1};
  }
  static ConvSpec depthwise(std::size_t channels, std::size_t k, std::size_t stride,
                            std::size_t pad) {
    return {channels, channels, k, k, stride, pad, channels};
  }

  bool is_depthwise() const { return groups == in_channels && groups == out_channels; }
  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  Shape weight_shape() const { return {out_channels, in_per_group(), kh, kw}; }
  std::size_t out_h(std::size_t h) const { return (h + 2 * padding - kh) / stride + 1; }
  std::size_t out_w(std::size_t w) const { return (w + 2 * padding - kw) / stride + 1; }
  Shape output_shape(const Shape& in) const {
    return {in.n, out_channels, out_h(in.h), out_w(in.w)};
  }

  /// Throws UsageError on zero extents or groups not dividing the channels.
  void validate() const;
  /// validate() plus input channel and window-fits-input checks.
  void validate_input(const Shape& in) const;
};

/// Sign-packed filters with a per-output-channel magnitude.
struct BinaryConvWeights {
  BitTensor packed;  // out_channels x in_per_group x kh x kw
  std::vector<float> magnitude;

  /// Packs sign(w) (ties to +1) with the given magnitudes.
  static BinaryConvWeights from_real(const Tensor& w, std::vector<float> magnitude);
  /// Packs sign(w) with magnitude = mean |w| per output channel.
  static BinaryConvWeights from_real(const Tensor& w);

  /// magnitude[c] * (+-1 decodings).
  Tensor decoded() const;
};

/// How spatial padding positions are encoded in binary kernels. Zero pads
/// contribute nothing to the accumulator; MinusOne treats them as -1
/// activations (the "one-padding" some engines use).
enum class PadValue { Zero, MinusOne };

/// One branch of a multi-binary depth-wise conv: the shared input is packed
/// against `threshold`, convolved with `weights` and scaled by `magnitude`.
struct BinaryBranch {
  BinaryConvWeights weights;
  std::vector<float> threshold;
  std::vector<float> magnitude;
};

/// Direct cross-correlation with zero padding. OpenMP-parallel over
/// (sample, output channel).
Tensor conv_float(const Tensor& x, const Tensor& w, const ConvSpec& spec);

/// XNOR-popcount convolution of packed +-1 activations with packed filters.
/// Supports groups == 1 (regular) and depth-wise. Accumulates in int32 and
/// scales by the weight magnitude once per output.
Tensor conv_binary(const BitTensor& xb, const BinaryConvWeights& w, const ConvSpec& spec,
                   PadValue pad = PadValue::Zero);

/// 1.58-bit depth-wise conv: two binary branches over the same input, each
/// with its own boundary (alpha_i) and magnitude (beta_i), summed.
Tensor conv_dual_dw(const Tensor& x, const BinaryConvWeights& w1, const BinaryConvWeights& w2,
                    const DualQuantParams& q, const ConvSpec& spec,
                    PadValue pad = PadValue::Zero);

/// Sum of 1..4 parallel binary depth-wise branches.
Tensor conv_multi_dw(const Tensor& x, std::span<const BinaryBranch> branches,
                     const ConvSpec& spec, PadValue pad = PadValue::Zero);

/// Gradients of conv_float.
Tensor conv_float_backward_input(const Tensor& dy, const Tensor& w, const ConvSpec& spec,
                                 const Shape& x_shape);
Tensor conv_float_backward_weight(const Tensor& dy, const Tensor& x, const ConvSpec& spec);

/// Serial, loop-for-loop implementations kept as oracles for the kernels
/// above. Slow by construction.
namespace reference {

Tensor conv_float(const Tensor& x, const Tensor& w, const ConvSpec& spec);

/// conv_float on decoded operands: unpack(xb) against magnitude * unpack(w).
/// With PadValue::MinusOne the input is first padded with -1.
Tensor conv_binary(const BitTensor& xb, const BinaryConvWeights& w, const ConvSpec& spec,
                   PadValue pad = PadValue::Zero);

Tensor conv_multi_dw(const Tensor& x, std::span<const BinaryBranch> branches,
                     const ConvSpec& spec);

}  // namespace reference

}  // namespace bdnet
