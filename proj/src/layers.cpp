#include "bdnet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bdnet/error.hpp"

namespace bdnet {

BNParams BNParams::identity(std::size_t channels) {
  BNParams p;
  p.gamma.assign(channels, 1.0f);
  p.beta_shift.assign(channels, 0.0f);
  p.mu.assign(channels, 0.0f);
  p.var.assign(channels, 1.0f);
  return p;
}

float BNParams::alpha_bn(std::size_t c) const {
  return static_cast<float>(gamma[c] / std::sqrt(static_cast<double>(var[c]) + eps));
}

void BNParams::validate() const {
  const std::size_t c = gamma.size();
  if (beta_shift.size() != c || mu.size() != c || var.size() != c) {
    throw InvariantError("BNParams: per-channel vectors differ in length");
  }
  if (!(eps > 0.0f)) throw InvariantError("BNParams: eps must be positive");
  for (float v : var) {
    if (!(v >= 0.0f)) throw InvariantError("BNParams: running variance must be >= 0");
  }
}

const char* to_string(BlockTopology t) {
  switch (t) {
    case BlockTopology::NoResidual: return "none";
    case BlockTopology::PostBNResidual: return "post-bn";
    case BlockTopology::PreBNResidual: return "pre-bn";
  }
  return "?";
}

BlockTopology topology_from_string(const std::string& s) {
  if (s == "none") return BlockTopology::NoResidual;
  if (s == "post-bn") return BlockTopology::PostBNResidual;
  if (s == "pre-bn") return BlockTopology::PreBNResidual;
  throw UsageError("unknown topology '" + s + "' (none|post-bn|pre-bn)");
}

namespace {
void check_channels(const Tensor& x, const BNParams& p) {
  if (p.channels() != x.shape().c) {
    throw UsageError("batchnorm: " + std::to_string(p.channels()) + " channels of parameters for " +
                     std::to_string(x.shape().c) + "-channel input");
  }
}
}  // namespace

Tensor batchnorm_forward(const Tensor& x, const BNParams& p) {
  check_channels(x, p);
  const Shape& s = x.shape();
  Tensor y(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    const float a = p.alpha_bn(c);
    const float mu = p.mu[c], b = p.beta_shift[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = a * (src[i] - mu) + b;
    }
  }
  return y;
}

Tensor batchnorm_forward(const Tensor& x, BNParams& p, bool training, BNCache* cache) {
  check_channels(x, p);
  const Shape& s = x.shape();
  const std::size_t count = s.n * s.plane();
  Tensor y(s);
  if (cache) {
    cache->xhat = Tensor(s);
    cache->inv_std.assign(s.c, 0.0);
    cache->training = training;
  }
  for (std::size_t c = 0; c < s.c; ++c) {
    double mean, var;
    if (training) {
      double sum = 0.0;
      for (std::size_t n = 0; n < s.n; ++n)
        for (float v : x.plane(n, c)) sum += v;
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n)
        for (float v : x.plane(n, c)) sq += (v - mean) * (v - mean);
      var = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      p.mu[c] = static_cast<float>((1.0 - p.momentum) * p.mu[c] + p.momentum * mean);
      p.var[c] = static_cast<float>((1.0 - p.momentum) * p.var[c] + p.momentum * unbiased);
    } else {
      mean = p.mu[c];
      var = p.var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + p.eps);
    if (cache) cache->inv_std[c] = inv_std;
    const double g = p.gamma[c], b = p.beta_shift[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        const double xh = (src[i] - mean) * inv_std;
        if (cache) cache->xhat.plane(n, c)[i] = static_cast<float>(xh);
        dst[i] = static_cast<float>(g * xh + b);
      }
    }
  }
  return y;
}

BNGrads batchnorm_backward(const Tensor& dy, const BNCache& cache, const BNParams& p) {
  const Shape& s = dy.shape();
  if (cache.xhat.shape() != s) throw UsageError("batchnorm_backward: cache shape mismatch");
  const double count = static_cast<double>(s.n * s.plane());
  BNGrads g{Tensor(s), std::vector<double>(s.c, 0.0), std::vector<double>(s.c, 0.0)};
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      auto d = dy.plane(n, c);
      auto xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < d.size(); ++i) {
        sum_dy += d[i];
        sum_dy_xhat += static_cast<double>(d[i]) * xh[i];
      }
    }
    g.dbeta[c] = sum_dy;
    g.dgamma[c] = sum_dy_xhat;
    const double k = p.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      auto d = dy.plane(n, c);
      auto xh = cache.xhat.plane(n, c);
      auto dx = g.dx.plane(n, c);
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (cache.training) {
          dx[i] = static_cast<float>(k * (d[i] - sum_dy / count - xh[i] * sum_dy_xhat / count));
        } else {
          dx[i] = static_cast<float>(k * d[i]);
        }
      }
    }
  }
  return g;
}

Tensor avg_pool_2x2(const Tensor& x) {
  const Shape& s = x.shape();
  const Shape os{s.n, s.c, (s.h + 1) / 2, (s.w + 1) / 2};
  Tensor y(os);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          float sum = 0.0f;
          int cnt = 0;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t iy = 2 * oy + dy, ix = 2 * ox + dx;
              if (iy < s.h && ix < s.w) {
                sum += x.at(n, c, iy, ix);
                ++cnt;
              }
            }
          }
          y.at(n, c, oy, ox) = sum / static_cast<float>(cnt);
        }
      }
    }
  }
  return y;
}

Tensor avg_pool_2x2_backward(const Tensor& dy, const Shape& x_shape) {
  Tensor dx(x_shape);
  const Shape& os = dy.shape();
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t c = 0; c < os.c; ++c) {
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const std::size_t h1 = std::min(x_shape.h, 2 * oy + 2), w1 = std::min(x_shape.w, 2 * ox + 2);
          const float cnt = static_cast<float>((h1 - 2 * oy) * (w1 - 2 * ox));
          const float g = dy.at(n, c, oy, ox) / cnt;
          for (std::size_t iy = 2 * oy; iy < h1; ++iy)
            for (std::size_t ix = 2 * ox; ix < w1; ++ix) dx.at(n, c, iy, ix) += g;
        }
      }
    }
  }
  return dx;
}

Tensor match_residual(const Tensor& x, const Shape& like) {
  const Shape& s = x.shape();
  if (s.n != like.n) throw UsageError("residual: batch size mismatch");
  Tensor r = x;
  if (s.h != like.h || s.w != like.w) {
    if ((s.h + 1) / 2 != like.h || (s.w + 1) / 2 != like.w) {
      throw UsageError("residual: no downsampling rule maps " + s.str() + " to " + like.str());
    }
    r = avg_pool_2x2(x);
  }
  if (r.shape().c != like.c) {
    if (like.c < r.shape().c) {
      throw UsageError("residual: cannot reduce " + std::to_string(r.shape().c) + " channels to " +
                       std::to_string(like.c));
    }
    r = broadcast_residual(r, like.c);
  }
  return r;
}

Tensor pre_bn_block(const Tensor& x, const ConvFn& conv, const BNParams& p) {
  Tensor z = conv(x);
  z += match_residual(x, z.shape());
  return batchnorm_forward(z, p);
}

Tensor post_bn_block(const Tensor& x, const ConvFn& conv, const BNParams& p) {
  const Tensor z = conv(x);
  Tensor y = batchnorm_forward(z, p);
  y += match_residual(x, z.shape());
  return y;
}

Tensor broadcast_residual(const Tensor& x, std::size_t target_channels) {
  const Shape& s = x.shape();
  if (target_channels < s.c) {
    throw UsageError("broadcast_residual: target " + std::to_string(target_channels) +
                     " < input channels " + std::to_string(s.c));
  }
  Tensor y(Shape{s.n, target_channels, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t j = 0; j < target_channels; ++j) {
      auto src = x.plane(n, j % s.c);
      std::copy(src.begin(), src.end(), y.plane(n, j).begin());
    }
  }
  return y;
}

Tensor broadcast_residual_backward(const Tensor& dy, std::size_t source_channels) {
  const Shape& s = dy.shape();
  if (source_channels == 0 || source_channels > s.c) {
    throw UsageError("broadcast_residual_backward: bad source channel count");
  }
  Tensor dx(Shape{s.n, source_channels, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t j = 0; j < s.c; ++j) {
      auto src = dy.plane(n, j);
      auto dst = dx.plane(n, j % source_channels);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }
  }
  return dx;
}

Tensor shifted_prelu(const Tensor& x, const std::vector<float>& shift_in,
                     const std::vector<float>& slope, const std::vector<float>& shift_out,
                     const Tensor* side) {
  const Shape& s = x.shape();
  if (side && side->shape() != s) throw UsageError("shifted_prelu: side tensor shape mismatch");
  if (shift_in.size() != s.c || slope.size() != s.c || shift_out.size() != s.c) {
    throw UsageError("shifted_prelu: parameter channel count mismatch");
  }
  Tensor y(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto sel = (side ? *side : x).plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        const float z = src[i] - shift_in[c];
        const bool pos = sel[i] - shift_in[c] >= 0.0f;
        dst[i] = (pos ? z : slope[c] * z) + shift_out[c];
      }
    }
  }
  return y;
}

PReLUGrads shifted_prelu_backward(const Tensor& dy, const Tensor& x,
                                  const std::vector<float>& shift_in,
                                  const std::vector<float>& slope, const Tensor* side) {
  const Shape& s = x.shape();
  if (dy.shape() != s || (side && side->shape() != s)) {
    throw UsageError("shifted_prelu_backward: shape mismatch");
  }
  PReLUGrads g{Tensor(s), std::vector<double>(s.c, 0.0), std::vector<double>(s.c, 0.0),
               std::vector<double>(s.c, 0.0)};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto sel = (side ? *side : x).plane(n, c);
      auto d = dy.plane(n, c);
      auto dx = g.dx.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        const float z = src[i] - shift_in[c];
        const bool pos = sel[i] - shift_in[c] >= 0.0f;
        const float k = pos ? 1.0f : slope[c];
        dx[i] = d[i] * k;
        g.dshift_in[c] -= static_cast<double>(d[i]) * k;
        if (!pos) g.dslope[c] += static_cast<double>(d[i]) * z;
        g.dshift_out[c] += d[i];
      }
    }
  }
  return g;
}

}  // namespace bdnet
