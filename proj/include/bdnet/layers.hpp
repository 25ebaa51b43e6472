#pragma once

#include <functional>
#include <vector>

#include "bdnet/tensor.hpp"

namespace bdnet {

/// Per-channel batch-norm state. The effective scale is
/// alpha_bn = gamma / sqrt(var + eps).
struct BNParams {
  std::vector<float> gamma;
  std::vector<float> beta_shift;
  std::vector<float> mu;
  std::vector<float> var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BNParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
  float alpha_bn(std::size_t c) const;
  void validate() const;
};

enum class BlockTopology { NoResidual, PostBNResidual, PreBNResidual };

const char* to_string(BlockTopology t);
BlockTopology topology_from_string(const std::string& s);

/// Values needed by batchnorm_backward.
struct BNCache {
  Tensor xhat;                  // normalized input
  std::vector<double> inv_std;  // 1 / sqrt(var + eps) per channel, as used
  bool training = false;
};

/// Inference: y = alpha_bn (x - mu) + beta_shift with running statistics.
Tensor batchnorm_forward(const Tensor& x, const BNParams& p);

/// training == true normalizes with batch statistics and folds them into the
/// running statistics with p.momentum (unbiased variance); otherwise as above.
Tensor batchnorm_forward(const Tensor& x, BNParams& p, bool training, BNCache* cache = nullptr);

struct BNGrads {
  Tensor dx;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
};
BNGrads batchnorm_backward(const Tensor& dy, const BNCache& cache, const BNParams& p);

using ConvFn = std::function<Tensor(const Tensor&)>;

/// Residual path used when a block's conv changes the spatial extent: 2x2
/// average pooling with stride 2 (ceil mode, partial windows averaged over
/// their valid elements).
Tensor avg_pool_2x2(const Tensor& x);
Tensor avg_pool_2x2_backward(const Tensor& dy, const Shape& x_shape);

/// Brings the shortcut x to the shape of the conv output `like`: identity,
/// 2x2 average pooling for a stride-2 conv, then cyclic channel
/// replication for a wider conv. Throws UsageError when no rule applies.
Tensor match_residual(const Tensor& x, const Shape& like);

/// BN(conv(x) + x): the shortcut joins before normalization.
Tensor pre_bn_block(const Tensor& x, const ConvFn& conv, const BNParams& p);
/// BN(conv(x)) + x.
Tensor post_bn_block(const Tensor& x, const ConvFn& conv, const BNParams& p);

/// Output channel j is input channel j mod C_in.
Tensor broadcast_residual(const Tensor& x, std::size_t target_channels);
/// Sums the upstream gradient of replicated channels back onto their source.
Tensor broadcast_residual_backward(const Tensor& dy, std::size_t source_channels);

/// z = x - shift_in; y = (z >= 0 ? z : slope z) + shift_out, per channel.
/// With `side`, the branch is chosen from side - shift_in instead of z.
Tensor shifted_prelu(const Tensor& x, const std::vector<float>& shift_in,
                     const std::vector<float>& slope, const std::vector<float>& shift_out,
                     const Tensor* side = nullptr);

struct PReLUGrads {
  Tensor dx;
  std::vector<double> dshift_in;
  std::vector<double> dslope;
  std::vector<double> dshift_out;
};
PReLUGrads shifted_prelu_backward(const Tensor& dy, const Tensor& x,
                                  const std::vector<float>& shift_in,
                                  const std::vector<float>& slope,
                                  const Tensor* side = nullptr);

}  // namespace bdnet
