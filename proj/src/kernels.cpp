#include "bdnet/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <string>

#include "bdnet/error.hpp"

namespace bdnet {

namespace {

constexpr std::size_t kW = BitTensor::kWordBits;

std::string geometry_str(const ConvSpec& s) {
  return "conv(" + std::to_string(s.in_channels) + "->" + std::to_string(s.out_channels) + ", " +
         std::to_string(s.kh) + "x" + std::to_string(s.kw) + ", stride " +
         std::to_string(s.stride) + ", pad " + std::to_string(s.padding) + ", groups " +
         std::to_string(s.groups) + ")";
}

// Output-column range [lo, hi) whose input column ox*s + k - p lies in [0, w).
struct ColRange {
  std::size_t lo, hi;
};

ColRange valid_cols(std::size_t out_w, std::size_t in_w, std::size_t stride, std::size_t k,
                    std::size_t pad) {
  // ox*s + k >= p  and  ox*s + k - p <= in_w - 1
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  std::size_t hi = 0;
  if (in_w - 1 + pad >= k) hi = (in_w - 1 + pad - k) / stride + 1;
  hi = std::min(hi, out_w);
  lo = std::min(lo, hi);
  return {lo, hi};
}

void check_weights(const BinaryConvWeights& w, const ConvSpec& spec) {
  if (w.packed.shape() != spec.weight_shape()) {
    throw UsageError("binary weights shape " + w.packed.shape().str() + " does not match " +
                     geometry_str(spec));
  }
  if (w.magnitude.size() != spec.out_channels) {
    throw UsageError("binary weights need one magnitude per output channel");
  }
}

std::uint64_t extract64(const std::uint64_t* words, std::size_t bitpos) {
  const std::size_t k = bitpos / kW;
  const std::size_t o = bitpos % kW;
  if (o == 0) return words[k];
  return (words[k] >> o) | (words[k + 1] << (kW - o));
}

// Bit-sliced add of a 1-bit-per-lane word into a little-endian counter.
inline void counter_add(std::uint64_t* cnt, std::size_t bits, std::uint64_t carry) {
  for (std::size_t i = 0; i < bits && carry; ++i) {
    const std::uint64_t t = cnt[i] & carry;
    cnt[i] ^= carry;
    carry = t;
  }
}

// Integer accumulators of a depth-wise binary conv: acc = sum over live taps
// of (+-1 activation) * (+-1 weight). Output lanes are 64 consecutive output
// columns; each tap contributes one XNOR word per lane block, summed into a
// bit-sliced counter.
void dw_binary_accumulate(const BitTensor& xb, const BitTensor& wp, const ConvSpec& spec,
                          PadValue pad, std::vector<std::int32_t>& acc) {
  const Shape& in = xb.shape();
  const std::size_t H = in.h, W = in.w, s = spec.stride, p = spec.padding;
  const std::size_t kh = spec.kh, kw = spec.kw;
  const std::size_t OH = spec.out_h(H), OW = spec.out_w(W);
  const std::size_t nb = (OW + kW - 1) / kW;
  const std::size_t taps = kh * kw;
  const std::size_t cbits = static_cast<std::size_t>(std::bit_width(taps));

  // Phase-decomposed rows: bit (guard + m) of phase r holds input column
  // m*s + r. One guard word on the left absorbs negative lane offsets.
  const std::size_t guard = (p + s * kW - 1) / (s * kW);
  const std::size_t phase_bits = (W + s - 1) / s;
  const std::size_t phase_words = guard + std::max(nb, (phase_bits + kW - 1) / kW) + 2;
  const std::size_t row_words = phase_words * s;

  // Valid-lane masks per (kx, block) and live column-tap counts per lane.
  std::vector<std::uint64_t> col_mask(kw * nb, 0);
  std::vector<std::int32_t> col_live(OW, 0);
  for (std::size_t kx = 0; kx < kw; ++kx) {
    const ColRange r = valid_cols(OW, W, s, kx, p);
    for (std::size_t j = r.lo; j < r.hi; ++j) {
      col_mask[kx * nb + j / kW] |= std::uint64_t{1} << (j % kW);
      col_live[j]++;
    }
  }

  acc.assign(in.n * in.c * OH * OW, 0);

#pragma omp parallel
  {
    std::vector<std::uint64_t> rows(H * row_words);
    std::vector<std::uint64_t> cnt(cbits * nb);
#pragma omp for collapse(2) schedule(static)
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t c = 0; c < in.c; ++c) {
        const auto plane = xb.plane(n, c);
        std::fill(rows.begin(), rows.end(), 0);
        for (std::size_t iy = 0; iy < H; ++iy) {
          std::uint64_t* row = rows.data() + iy * row_words;
          if (s == 1) {
            // Copy W bits starting at plane bit iy*W, word at a time.
            for (std::size_t k = 0; k * kW < W; ++k) {
              const std::size_t bit0 = iy * W + k * kW;
              const std::size_t take = std::min(kW, W - k * kW);
              const std::size_t wi = bit0 / kW, off = bit0 % kW;
              std::uint64_t v = plane[wi] >> off;
              if (off != 0 && off + take > kW) v |= plane[wi + 1] << (kW - off);
              if (take < kW) v &= (std::uint64_t{1} << take) - 1;
              row[guard + k] = v;
            }
          } else {
            for (std::size_t ix = 0; ix < W; ++ix) {
              const std::size_t i = iy * W + ix;
              if ((plane[i / kW] >> (i % kW)) & 1u) {
                const std::size_t r = ix % s, m = guard * kW + ix / s;
                row[r * phase_words + m / kW] |= std::uint64_t{1} << (m % kW);
              }
            }
          }
        }
        const auto wplane = wp.plane(c, 0);
        std::int32_t* out = acc.data() + (n * in.c + c) * OH * OW;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          std::fill(cnt.begin(), cnt.end(), 0);
          std::int32_t row_live = 0;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                      static_cast<std::ptrdiff_t>(p);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            ++row_live;
            const std::uint64_t* row = rows.data() + static_cast<std::size_t>(iy) * row_words;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::size_t ti = ky * kw + kx;
              const bool wbit = (wplane[ti / kW] >> (ti % kW)) & 1u;
              const std::ptrdiff_t t =
                  static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p);
              const std::ptrdiff_t ss = static_cast<std::ptrdiff_t>(s);
              const std::ptrdiff_t r = ((t % ss) + ss) % ss;
              const std::ptrdiff_t q = (t - r) / ss;
              const std::uint64_t* phase = row + static_cast<std::size_t>(r) * phase_words;
              for (std::size_t b = 0; b < nb; ++b) {
                const std::size_t pos = static_cast<std::size_t>(
                    static_cast<std::ptrdiff_t>(guard * kW + b * kW) + q);
                const std::uint64_t xv = extract64(phase, pos);
                const std::uint64_t agree = (wbit ? xv : ~xv) & col_mask[kx * nb + b];
                counter_add(cnt.data() + b * cbits, cbits, agree);
              }
            }
          }
          for (std::size_t j = 0; j < OW; ++j) {
            const std::size_t b = j / kW, l = j % kW;
            std::int32_t count = 0;
            for (std::size_t i = 0; i < cbits; ++i) {
              count |= static_cast<std::int32_t>((cnt[b * cbits + i] >> l) & 1u) << i;
            }
            const std::int32_t live = row_live * col_live[j];
            std::int32_t a = 2 * count - live;
            if (pad == PadValue::MinusOne && live != static_cast<std::int32_t>(taps)) {
              // Each out-of-range tap contributes (-1) * w.
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                          static_cast<std::ptrdiff_t>(p);
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(j * s + kx) -
                                            static_cast<std::ptrdiff_t>(p);
                  const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(H) &&
                                      ix >= 0 && ix < static_cast<std::ptrdiff_t>(W);
                  if (inside) continue;
                  const std::size_t ti = ky * kw + kx;
                  a -= ((wplane[ti / kW] >> (ti % kW)) & 1u) ? 1 : -1;
                }
              }
            }
            out[oy * OW + j] = a;
          }
        }
      }
    }
  }
}

// Integer accumulators of a regular (groups == 1) binary conv. Activations
// and filters are transposed to pixel-major channel words so one XNOR +
// popcount covers 64 input channels of one tap.
void regular_binary_accumulate(const BitTensor& xb, const BitTensor& wp, const ConvSpec& spec,
                               PadValue pad, std::vector<std::int32_t>& acc) {
  const Shape& in = xb.shape();
  const std::size_t C = in.c, H = in.h, W = in.w, s = spec.stride, p = spec.padding;
  const std::size_t kh = spec.kh, kw = spec.kw, OC = spec.out_channels;
  const std::size_t OH = spec.out_h(H), OW = spec.out_w(W);
  const std::size_t cw = (C + kW - 1) / kW;
  const std::size_t taps = kh * kw;

  // Channel pad bits: 0 in activations, 1 in filters, so XNOR yields 0 there.
  std::vector<std::uint64_t> xt(in.n * H * W * cw, 0);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t i = 0; i < H * W; ++i) {
      std::uint64_t* dst = xt.data() + (n * H * W + i) * cw;
      for (std::size_t c = 0; c < C; ++c) {
        const auto plane = xb.plane(n, c);
        if ((plane[i / kW] >> (i % kW)) & 1u) dst[c / kW] |= std::uint64_t{1} << (c % kW);
      }
    }
  }
  std::vector<std::uint64_t> wt(OC * taps * cw, 0);
  std::vector<std::int32_t> wsum(OC * taps, 0);  // sum of +-1 weights per tap
  for (std::size_t oc = 0; oc < OC; ++oc) {
    for (std::size_t t = 0; t < taps; ++t) {
      std::uint64_t* dst = wt.data() + (oc * taps + t) * cw;
      for (std::size_t k = 0; k < cw; ++k) dst[k] = ~std::uint64_t{0};
      for (std::size_t c = 0; c < C; ++c) {
        const auto plane = wp.plane(oc, c);
        const bool bit = (plane[t / kW] >> (t % kW)) & 1u;
        if (!bit) dst[c / kW] &= ~(std::uint64_t{1} << (c % kW));
        wsum[oc * taps + t] += bit ? 1 : -1;
      }
    }
  }

  acc.assign(in.n * OC * OH * OW, 0);
  const std::int32_t cin = static_cast<std::int32_t>(C);
#pragma omp parallel
  {
    std::vector<const std::uint64_t*> tap_ptr(taps);
    std::vector<std::size_t> live_taps(taps);
#pragma omp for collapse(2) schedule(static)
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t oy = 0; oy < OH; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
          std::size_t nlive = 0;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                      static_cast<std::ptrdiff_t>(p);
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) -
                                        static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H) || ix < 0 ||
                  ix >= static_cast<std::ptrdiff_t>(W)) {
                continue;
              }
              tap_ptr[nlive] =
                  xt.data() + (n * H * W + static_cast<std::size_t>(iy) * W +
                               static_cast<std::size_t>(ix)) * cw;
              live_taps[nlive] = ky * kw + kx;
              ++nlive;
            }
          }
          const std::int32_t base = -cin * static_cast<std::int32_t>(nlive);
          for (std::size_t oc = 0; oc < OC; ++oc) {
            const std::uint64_t* wrow = wt.data() + oc * taps * cw;
            std::int32_t agree = 0;
            for (std::size_t t = 0; t < nlive; ++t) {
              const std::uint64_t* xv = tap_ptr[t];
              const std::uint64_t* wv = wrow + live_taps[t] * cw;
              for (std::size_t k = 0; k < cw; ++k) agree += std::popcount(~(xv[k] ^ wv[k]));
            }
            std::int32_t a = 2 * agree + base;
            if (pad == PadValue::MinusOne && nlive != taps) {
              std::int32_t all = 0, live = 0;
              for (std::size_t t = 0; t < taps; ++t) all += wsum[oc * taps + t];
              for (std::size_t t = 0; t < nlive; ++t) live += wsum[oc * taps + live_taps[t]];
              a -= all - live;
            }
            acc[((n * OC + oc) * OH + oy) * OW + ox] = a;
          }
        }
      }
    }
  }
}

void check_multi(const Tensor& x, std::span<const BinaryBranch> branches, const ConvSpec& spec) {
  if (branches.empty() || branches.size() > 4) {
    throw UsageError("conv_multi_dw: need 1..4 branches, got " + std::to_string(branches.size()));
  }
  if (!spec.is_depthwise()) throw UsageError("conv_multi_dw: spec must be depth-wise");
  spec.validate_input(x.shape());
  for (const auto& b : branches) {
    check_weights(b.weights, spec);
    if (b.threshold.size() != spec.in_channels || b.magnitude.size() != spec.in_channels) {
      throw UsageError("conv_multi_dw: branch quantizer needs one entry per channel");
    }
  }
}

Tensor pad_input(const Tensor& x, std::size_t pad, float value) {
  const Shape& s = x.shape();
  Tensor out(Shape{s.n, s.c, s.h + 2 * pad, s.w + 2 * pad}, value);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) out.at(n, c, h + pad, w + pad) = x.at(n, c, h, w);
  return out;
}

}  // namespace

void ConvSpec::validate() const {
  if (in_channels == 0 || out_channels == 0 || kh == 0 || kw == 0 || stride == 0 || groups == 0) {
    throw UsageError("invalid " + geometry_str(*this) + ": zero extent");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw UsageError("invalid " + geometry_str(*this) + ": groups must divide channel counts");
  }
}

void ConvSpec::validate_input(const Shape& in) const {
  validate();
  in.validate();
  if (in.c != in_channels) {
    throw UsageError("input has " + std::to_string(in.c) + " channels, " + geometry_str(*this) +
                     " expects " + std::to_string(in_channels));
  }
  if (in.h + 2 * padding < kh || in.w + 2 * padding < kw) {
    throw UsageError("input " + in.str() + " smaller than the window of " + geometry_str(*this));
  }
}

BinaryConvWeights BinaryConvWeights::from_real(const Tensor& w, std::vector<float> magnitude) {
  if (magnitude.size() != w.shape().n) {
    throw UsageError("BinaryConvWeights: need one magnitude per output channel");
  }
  for (float m : magnitude) {
    if (!(m >= 0.0f)) throw InvariantError("BinaryConvWeights: magnitude must be >= 0");
  }
  // Pack each filter (in_per_group x kh x kw) as one bit row per input channel.
  return {pack(w, 0.0f), std::move(magnitude)};
}

BinaryConvWeights BinaryConvWeights::from_real(const Tensor& w) {
  const Shape& s = w.shape();
  const std::size_t per = s.c * s.h * s.w;
  std::vector<float> mag(s.n, 0.0f);
  for (std::size_t o = 0; o < s.n; ++o) {
    double sum = 0.0;
    for (std::size_t i = 0; i < per; ++i) sum += std::abs(w[o * per + i]);
    mag[o] = static_cast<float>(sum / static_cast<double>(per));
  }
  return from_real(w, std::move(mag));
}

Tensor BinaryConvWeights::decoded() const {
  Tensor out = unpack(packed);
  const std::size_t per = packed.shape().c * packed.shape().plane();
  for (std::size_t o = 0; o < packed.shape().n; ++o)
    for (std::size_t i = 0; i < per; ++i) out[o * per + i] *= magnitude[o];
  return out;
}

Tensor conv_float(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  spec.validate_input(x.shape());
  if (w.shape() != spec.weight_shape()) {
    throw UsageError("weight shape " + w.shape().str() + " does not match " + geometry_str(spec));
  }
  const Shape& in = x.shape();
  const Shape os = spec.output_shape(in);
  const std::size_t s = spec.stride, p = spec.padding, ipg = spec.in_per_group(),
                    opg = spec.out_per_group();
  Tensor out(os);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t oc = 0; oc < os.c; ++oc) {
      float* dst = out.plane(n, oc).data();
      const std::size_t g = oc / opg;
      for (std::size_t icg = 0; icg < ipg; ++icg) {
        const float* src = x.plane(n, g * ipg + icg).data();
        for (std::size_t ky = 0; ky < spec.kh; ++ky) {
          for (std::size_t kx = 0; kx < spec.kw; ++kx) {
            const float wv = w.at(oc, icg, ky, kx);
            const ColRange cr = valid_cols(os.w, in.w, s, kx, p);
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                        static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
              // Unsigned wrap-around in `base` cancels for every valid ox.
              const std::size_t base = static_cast<std::size_t>(iy) * in.w + kx - p;
              float* drow = dst + oy * os.w;
              if (s == 1) {
                for (std::size_t ox = cr.lo; ox < cr.hi; ++ox) drow[ox] += wv * src[base + ox];
              } else {
                for (std::size_t ox = cr.lo; ox < cr.hi; ++ox) {
                  drow[ox] += wv * src[base + ox * s];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor conv_binary(const BitTensor& xb, const BinaryConvWeights& w, const ConvSpec& spec,
                   PadValue pad) {
  spec.validate_input(xb.shape());
  check_weights(w, spec);
  std::vector<std::int32_t> acc;
  if (spec.is_depthwise()) {
    dw_binary_accumulate(xb, w.packed, spec, pad, acc);
  } else if (spec.groups == 1) {
    regular_binary_accumulate(xb, w.packed, spec, pad, acc);
  } else {
    throw UsageError("conv_binary supports groups == 1 or depth-wise, got " + geometry_str(spec));
  }
  const Shape os = spec.output_shape(xb.shape());
  Tensor out(os);
  const std::size_t plane = os.plane();
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t c = 0; c < os.c; ++c) {
      const float m = w.magnitude[c];
      float* dst = out.plane(n, c).data();
      const std::int32_t* a = acc.data() + (n * os.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>(a[i]) * m;
    }
  }
  return out;
}

Tensor conv_multi_dw(const Tensor& x, std::span<const BinaryBranch> branches,
                     const ConvSpec& spec, PadValue pad) {
  check_multi(x, branches, spec);
  const Shape os = spec.output_shape(x.shape());
  Tensor out(os);
  const std::size_t plane = os.plane();
  std::vector<std::int32_t> acc;
  for (const auto& br : branches) {
    const BitTensor xb = pack(x, br.threshold);
    dw_binary_accumulate(xb, br.weights.packed, spec, pad, acc);
    for (std::size_t n = 0; n < os.n; ++n) {
      for (std::size_t c = 0; c < os.c; ++c) {
        const float scale = br.magnitude[c] * br.weights.magnitude[c];
        float* dst = out.plane(n, c).data();
        const std::int32_t* a = acc.data() + (n * os.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += static_cast<float>(a[i]) * scale;
      }
    }
  }
  return out;
}

Tensor conv_dual_dw(const Tensor& x, const BinaryConvWeights& w1, const BinaryConvWeights& w2,
                    const DualQuantParams& q, const ConvSpec& spec, PadValue pad) {
  q.validate();
  if (w1.packed.shape() != w2.packed.shape()) {
    throw UsageError("conv_dual_dw: branch weights differ in geometry");
  }
  if (q.channels() != spec.in_channels) {
    throw UsageError("conv_dual_dw: quantizer channel count mismatch");
  }
  const BinaryBranch branches[2] = {{w1, q.alpha1, q.beta1}, {w2, q.alpha2, q.beta2}};
  return conv_multi_dw(x, branches, spec, pad);
}

Tensor conv_float_backward_input(const Tensor& dy, const Tensor& w, const ConvSpec& spec,
                                 const Shape& x_shape) {
  spec.validate_input(x_shape);
  if (dy.shape() != spec.output_shape(x_shape)) {
    throw UsageError("conv backward: upstream shape does not match geometry");
  }
  const Shape& os = dy.shape();
  const std::size_t s = spec.stride, p = spec.padding, ipg = spec.in_per_group(),
                    opg = spec.out_per_group();
  Tensor dx(x_shape);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t n = 0; n < x_shape.n; ++n) {
    for (std::size_t ic = 0; ic < x_shape.c; ++ic) {
      float* dst = dx.plane(n, ic).data();
      const std::size_t g = ic / ipg, icg = ic % ipg;
      for (std::size_t oc = g * opg; oc < (g + 1) * opg; ++oc) {
        const float* src = dy.plane(n, oc).data();
        for (std::size_t ky = 0; ky < spec.kh; ++ky) {
          for (std::size_t kx = 0; kx < spec.kw; ++kx) {
            const float wv = w.at(oc, icg, ky, kx);
            const ColRange cr = valid_cols(os.w, x_shape.w, s, kx, p);
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                        static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(x_shape.h)) continue;
              const std::size_t base = static_cast<std::size_t>(iy) * x_shape.w + kx - p;
              const float* srow = src + oy * os.w;
              for (std::size_t ox = cr.lo; ox < cr.hi; ++ox) dst[base + ox * s] += wv * srow[ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

Tensor conv_float_backward_weight(const Tensor& dy, const Tensor& x, const ConvSpec& spec) {
  spec.validate_input(x.shape());
  if (dy.shape() != spec.output_shape(x.shape())) {
    throw UsageError("conv backward: upstream shape does not match geometry");
  }
  const Shape& in = x.shape();
  const Shape& os = dy.shape();
  const std::size_t s = spec.stride, p = spec.padding, ipg = spec.in_per_group(),
                    opg = spec.out_per_group();
  Tensor dw(spec.weight_shape());
#pragma omp parallel for schedule(static)
  for (std::size_t oc = 0; oc < os.c; ++oc) {
    const std::size_t g = oc / opg;
    for (std::size_t icg = 0; icg < ipg; ++icg) {
      for (std::size_t ky = 0; ky < spec.kh; ++ky) {
        for (std::size_t kx = 0; kx < spec.kw; ++kx) {
          const ColRange cr = valid_cols(os.w, in.w, s, kx, p);
          double sum = 0.0;
          for (std::size_t n = 0; n < in.n; ++n) {
            const float* src = x.plane(n, g * ipg + icg).data();
            const float* gy = dy.plane(n, oc).data();
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                        static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
              const std::size_t base = static_cast<std::size_t>(iy) * in.w + kx - p;
              const float* grow = gy + oy * os.w;
              float part = 0.0f;
              for (std::size_t ox = cr.lo; ox < cr.hi; ++ox) part += grow[ox] * src[base + ox * s];
              sum += part;
            }
          }
          dw.at(oc, icg, ky, kx) = static_cast<float>(sum);
        }
      }
    }
  }
  return dw;
}

namespace reference {

Tensor conv_float(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  spec.validate_input(x.shape());
  if (w.shape() != spec.weight_shape()) throw UsageError("reference::conv_float: weight shape");
  const Shape& in = x.shape();
  const Shape os = spec.output_shape(in);
  const std::size_t ipg = spec.in_per_group(), opg = spec.out_per_group();
  Tensor out(os);
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t oc = 0; oc < os.c; ++oc) {
      const std::size_t g = oc / opg;
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          float sum = 0.0f;
          for (std::size_t icg = 0; icg < ipg; ++icg) {
            for (std::size_t ky = 0; ky < spec.kh; ++ky) {
              for (std::size_t kx = 0; kx < spec.kw; ++kx) {
                const long iy = static_cast<long>(oy * spec.stride + ky) -
                                static_cast<long>(spec.padding);
                const long ix = static_cast<long>(ox * spec.stride + kx) -
                                static_cast<long>(spec.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) ||
                    ix >= static_cast<long>(in.w)) {
                  continue;
                }
                sum += x.at(n, g * ipg + icg, static_cast<std::size_t>(iy),
                            static_cast<std::size_t>(ix)) *
                       w.at(oc, icg, ky, kx);
              }
            }
          }
          out.at(n, oc, oy, ox) = sum;
        }
      }
    }
  }
  return out;
}

Tensor conv_binary(const BitTensor& xb, const BinaryConvWeights& w, const ConvSpec& spec,
                   PadValue pad) {
  spec.validate_input(xb.shape());
  check_weights(w, spec);
  if (pad == PadValue::Zero) return reference::conv_float(unpack(xb), w.decoded(), spec);
  ConvSpec unpadded = spec;
  unpadded.padding = 0;
  return reference::conv_float(pad_input(unpack(xb), spec.padding, -1.0f), w.decoded(),
                               unpadded);
}

Tensor conv_multi_dw(const Tensor& x, std::span<const BinaryBranch> branches,
                     const ConvSpec& spec) {
  check_multi(x, branches, spec);
  Tensor out(spec.output_shape(x.shape()));
  for (const auto& br : branches) {
    const Tensor act = binarize(x, BinQuantParams{br.threshold, br.magnitude});
    out += reference::conv_float(act, br.weights.decoded(), spec);
  }
  return out;
}

}  // namespace reference

}  // namespace bdnet
