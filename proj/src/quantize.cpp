#include "bdnet/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "bdnet/error.hpp"

namespace bdnet {

BinQuantParams BinQuantParams::uniform(std::size_t channels, float threshold, float magnitude) {
  return {std::vector<float>(channels, threshold), std::vector<float>(channels, magnitude)};
}

void BinQuantParams::validate() const {
  if (magnitude.size() != threshold.size()) {
    throw InvariantError("BinQuantParams: threshold/magnitude length mismatch");
  }
  for (float m : magnitude) {
    if (!(m >= 0.0f)) throw InvariantError("BinQuantParams: magnitude must be >= 0");
  }
}

DualQuantParams DualQuantParams::uniform(std::size_t channels, float alpha1, float alpha2,
                                         float beta1, float beta2) {
  return {std::vector<float>(channels, alpha1), std::vector<float>(channels, alpha2),
          std::vector<float>(channels, beta1), std::vector<float>(channels, beta2)};
}

void DualQuantParams::validate() const {
  const std::size_t c = alpha1.size();
  if (alpha2.size() != c || beta1.size() != c || beta2.size() != c) {
    throw InvariantError("DualQuantParams: per-channel vectors differ in length");
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (alpha1[i] > alpha2[i]) {
      throw InvariantError("DualQuantParams: alpha1 > alpha2 on channel " + std::to_string(i));
    }
    if (!(beta1[i] >= 0.0f) || !(beta2[i] >= 0.0f)) {
      throw InvariantError("DualQuantParams: negative magnitude on channel " +
                           std::to_string(i));
    }
  }
}

Tensor binarize(const Tensor& x, const BinQuantParams& p) {
  const Shape& s = x.shape();
  if (p.channels() != s.c || p.magnitude.size() != s.c) {
    throw UsageError("binarize: parameter channels " + std::to_string(p.channels()) +
                     " != tensor channels " + std::to_string(s.c));
  }
  for (float m : p.magnitude) {
    if (m < 0.0f) throw InvariantError("binarize: magnitude must be >= 0");
  }
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      const float th = p.threshold[c];
      const float m = p.magnitude[c];
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= th ? m : -m;
    }
  }
  return out;
}

BinQuantGrads binarize_backward(const Tensor& x, const BinQuantParams& p, const Tensor& upstream,
                                float clip) {
  const Shape& s = x.shape();
  if (p.channels() != s.c || p.magnitude.size() != s.c) {
    throw UsageError("binarize_backward: parameter channel count mismatch");
  }
  if (upstream.shape() != s) throw UsageError("binarize_backward: shape mismatch");
  if (!(clip > 0.0f)) throw UsageError("binarize_backward: clip must be positive");
  BinQuantGrads g{Tensor(s), std::vector<double>(s.c, 0.0), std::vector<double>(s.c, 0.0)};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto up = upstream.plane(n, c);
      auto dx = g.dx.plane(n, c);
      const float th = p.threshold[c];
      const float m = p.magnitude[c];
      for (std::size_t i = 0; i < src.size(); ++i) {
        const float z = src[i] - th;
        g.dmagnitude[c] += z >= 0.0f ? up[i] : -static_cast<double>(up[i]);
        if (std::abs(z) <= clip) {
          dx[i] = up[i] * m;
          g.dthreshold[c] -= static_cast<double>(up[i]) * m;
        }
      }
    }
  }
  return g;
}

Tensor ternarize(const Tensor& x, const DualQuantParams& p) {
  p.validate();
  const Shape& s = x.shape();
  if (p.channels() != s.c) throw UsageError("ternarize: channel count mismatch");
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      const float lo = -p.beta1[c] - p.beta2[c];
      const float mid = p.beta1[c] - p.beta2[c];
      const float hi = p.beta1[c] + p.beta2[c];
      for (std::size_t i = 0; i < src.size(); ++i) {
        const float v = src[i];
        dst[i] = v < p.alpha1[c] ? lo : (v < p.alpha2[c] ? mid : hi);
      }
    }
  }
  return out;
}

double effective_bits(std::size_t n) {
  if (n == 0) throw UsageError("effective_bits: need at least one conv");
  return std::log2(static_cast<double>(n) + 1.0);
}

EffectiveBits effective_bits_of(std::size_t n) { return {n, effective_bits(n)}; }

Tensor ste_grad_sign(const Tensor& x, const Tensor& upstream, float clip) {
  if (x.shape() != upstream.shape()) throw UsageError("ste_grad_sign: shape mismatch");
  if (!(clip > 0.0f)) throw UsageError("ste_grad_sign: clip must be positive");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::abs(x[i]) <= clip ? upstream[i] : 0.0f;
  }
  return out;
}

int otsu_threshold(std::span<const std::uint64_t> histogram) {
  if (histogram.size() != 256) throw UsageError("otsu_threshold: need 256 bins");
  const std::uint64_t total = std::accumulate(histogram.begin(), histogram.end(), std::uint64_t{0});
  if (total == 0) throw UsageError("otsu_threshold: empty histogram");
  std::uint64_t weighted_total = 0;
  for (std::size_t b = 0; b < 256; ++b) weighted_total += b * histogram[b];

  // sigma_b^2 = (s0*n1 - s1*n0)^2 / (N^2 n0 n1); the N^2 factor is dropped.
  int best_t = 0;
  long double best = 0.0L;
  std::uint64_t n0 = 0, s0 = 0;
  for (int t = 1; t < 256; ++t) {
    n0 += histogram[t - 1];
    s0 += static_cast<std::uint64_t>(t - 1) * histogram[t - 1];
    const std::uint64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const std::uint64_t s1 = weighted_total - s0;
    const long double diff = static_cast<long double>(s0) * n1 - static_cast<long double>(s1) * n0;
    const long double v = diff * diff / (static_cast<long double>(n0) * n1);
    if (v > best) {
      best = v;
      best_t = t;
    }
  }
  return best_t;
}

std::array<int, 2> otsu_two_thresholds(std::span<const std::uint64_t> histogram) {
  if (histogram.size() != 256) throw UsageError("otsu_two_thresholds: need 256 bins");
  std::array<long double, 257> cnt{}, sum{};
  for (int b = 0; b < 256; ++b) {
    cnt[b + 1] = cnt[b] + histogram[b];
    sum[b + 1] = sum[b] + static_cast<long double>(b) * histogram[b];
  }
  if (cnt[256] == 0) throw UsageError("otsu_two_thresholds: empty histogram");
  // Maximize sum_k n_k mu_k^2 over classes [0,t1), [t1,t2), [t2,256).
  auto term = [&](int lo, int hi) -> long double {
    const long double n = cnt[hi] - cnt[lo];
    if (n == 0) return 0.0L;
    const long double s = sum[hi] - sum[lo];
    return s * s / n;
  };
  std::array<int, 2> best_t{0, 0};
  long double best = -1.0L;
  for (int t1 = 0; t1 < 256; ++t1) {
    for (int t2 = t1; t2 < 256; ++t2) {
      const long double v = term(0, t1) + term(t1, t2) + term(t2, 256);
      if (v > best) {
        best = v;
        best_t = {t1, t2};
      }
    }
  }
  return best_t;
}

std::array<std::uint64_t, 256> histogram256(const Tensor& gray) {
  std::array<std::uint64_t, 256> h{};
  for (float v : gray.data()) {
    const long b = std::lround(v);
    h[static_cast<std::size_t>(std::clamp(b, 0L, 255L))]++;
  }
  return h;
}

Tensor binarize_image(const Tensor& gray, int t) {
  Tensor out(gray.shape());
  for (std::size_t i = 0; i < gray.size(); ++i) out[i] = gray[i] >= t ? 255.0f : 0.0f;
  return out;
}

Tensor ternarize_image(const Tensor& gray, int t1, int t2) {
  if (t1 > t2) throw UsageError("ternarize_image: t1 > t2");
  Tensor out(gray.shape());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const float v = gray[i];
    out[i] = v < t1 ? 0.0f : (v < t2 ? 128.0f : 255.0f);
  }
  return out;
}

}  // namespace bdnet
