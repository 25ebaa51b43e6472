#include "bdnet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include "bdnet/error.hpp"

namespace bdnet {

CostRow count_ops(const ConvSpec& spec, const Shape& input, bool binary, std::size_t branches,
                  const std::string& name) {
  spec.validate();
  spec.validate_input(input);
  const Shape os = spec.output_shape(input);
  const std::uint64_t macs = static_cast<std::uint64_t>(os.n) * os.c * os.plane() *
                             spec.in_per_group() * spec.kh * spec.kw * branches;
  CostRow r;
  r.layer = name;
  r.type = std::string(binary ? "binary_" : "float_") + (spec.is_depthwise() ? "dw" : "conv");
  (binary ? r.bops : r.flops) = macs;
  r.ops = static_cast<double>(r.bops) / 64.0 + static_cast<double>(r.flops);
  return r;
}

CostReport count_ops(const Network& net) {
  CostReport rep;
  rep.total.layer = "total";
  rep.total.type = "";
  for (const LayerCost& c : net.costs()) {
    CostRow r;
    r.layer = c.name;
    r.type = c.type;
    const std::uint64_t macs = c.macs * c.branches;
    (c.binary ? r.bops : r.flops) = macs;
    r.ops = static_cast<double>(r.bops) / 64.0 + static_cast<double>(r.flops);
    rep.total.bops += r.bops;
    rep.total.flops += r.flops;
    rep.rows.push_back(r);
  }
  rep.total.ops = static_cast<double>(rep.total.bops) / 64.0 + static_cast<double>(rep.total.flops);
  return rep;
}

std::vector<CostRow> table1_rows() {
  const Shape in{1, 128, 56, 56};
  return {count_ops(ConvSpec::regular(128, 128, 3, 1, 1), in, false, 1, "3x3 conv"),
          count_ops(ConvSpec::depthwise(128, 3, 1, 1), in, false, 1, "3x3 dw conv"),
          count_ops(ConvSpec::regular(128, 128, 3, 1, 1), in, true, 1, "binary 3x3 conv"),
          count_ops(ConvSpec::depthwise(128, 3, 1, 1), in, true, 1, "binary 3x3 dw conv")};
}

void write_cost_csv(std::ostream& os, const CostReport& report) {
  os << "layer,type,bops,flops,ops\n";
  char buf[64];
  auto row = [&](const CostRow& r) {
    std::snprintf(buf, sizeof buf, "%.17g", r.ops);
    os << r.layer << ',' << r.type << ',' << r.bops << ',' << r.flops << ',' << buf << '\n';
  };
  for (const auto& r : report.rows) row(r);
  row(report.total);
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols, rows);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::operator*(const Matrix& b) const {
  if (cols != b.rows) throw UsageError("matrix product dimension mismatch");
  Matrix c(rows, b.cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < cols; ++k) {
      const double v = (*this)(i, k);
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += v * b(k, j);
    }
  return c;
}

Matrix Matrix::operator+(const Matrix& b) const {
  if (rows != b.rows || cols != b.cols) throw UsageError("matrix sum dimension mismatch");
  Matrix c = *this;
  for (std::size_t i = 0; i < a.size(); ++i) c.a[i] += b.a[i];
  return c;
}

Matrix Matrix::operator*(double s) const {
  Matrix c = *this;
  for (auto& v : c.a) v *= s;
  return c;
}

double Matrix::max_abs() const {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

std::vector<double> singular_values(const Matrix& m) {
  if (m.rows == 0 || m.cols == 0) return {};
  // Columns of u are rotated until mutually orthogonal; their norms are the
  // singular values.
  Matrix u = m.rows >= m.cols ? m : m.transpose();
  const std::size_t rows = u.rows, n = u.cols;
  const double eps = std::numeric_limits<double>::epsilon();
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double up = u(i, p), uq = u(i, q);
          alpha += up * up;
          beta += uq * uq;
          gamma += up * uq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double up = u(i, p), uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += u(i, j) * u(i, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

std::vector<double> symmetric_eigenvalues(const Matrix& m) {
  if (m.rows != m.cols) throw UsageError("symmetric_eigenvalues: matrix is not square");
  Matrix a = m;
  const std::size_t n = a.rows;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += a(i, j) * a(i, j);
        if (i != j) off += a(i, j) * a(i, j);
      }
    if (off <= 1e-30 * std::max(total, 1e-300)) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t =
            std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

namespace {

double kappa_of(const std::vector<double>& sv) {
  if (sv.empty()) return kInfiniteKappa;
  const double top = sv.front(), bottom = sv.back();
  const double floor = top * static_cast<double>(sv.size()) * std::numeric_limits<double>::epsilon();
  if (!(top > 0.0) || bottom <= floor) return kInfiniteKappa;
  return top / bottom;
}

}  // namespace

ConditionReport condition_numbers(const Matrix& j, double alpha) {
  if (j.rows != j.cols || j.rows == 0) throw UsageError("condition_numbers: J must be square");
  ConditionReport r;
  r.alpha = alpha;
  r.spectrum_j = singular_values(j);
  r.spectrum_j_prime = singular_values(j + Matrix::identity(j.rows) * alpha);
  r.kappa_j = kappa_of(r.spectrum_j);
  r.kappa_j_prime = kappa_of(r.spectrum_j_prime);
  r.kappa_h = r.kappa_j * r.kappa_j;
  r.kappa_h_prime = r.kappa_j_prime * r.kappa_j_prime;
  const double l1 = r.spectrum_j.front(), ln = r.spectrum_j.back();
  if (r.kappa_j == kInfiniteKappa) {
    r.factored = r.approx = r.approx_abs_error = kInfiniteKappa;
    return r;
  }
  r.factored = (1.0 + alpha / l1) * (ln / (ln + alpha)) * r.kappa_j;
  r.approx = alpha > 0.0 ? (ln / alpha + ln / l1) * r.kappa_j : kInfiniteKappa;
  r.approx_abs_error = std::abs(r.approx - r.kappa_j_prime);
  return r;
}

Matrix dw_conv_matrix(const Tensor& w, std::size_t h, std::size_t width) {
  const Shape& ws = w.shape();
  if (ws.c != 1) throw UsageError("dw_conv_matrix: weights must be depth-wise (C,1,kh,kw)");
  const std::size_t C = ws.n, dim = C * h * width;
  const auto ph = static_cast<std::ptrdiff_t>(ws.h / 2), pw = static_cast<std::ptrdiff_t>(ws.w / 2);
  Matrix m(dim, dim);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < h; ++oy)
      for (std::size_t ox = 0; ox < width; ++ox)
        for (std::size_t ky = 0; ky < ws.h; ++ky)
          for (std::size_t kx = 0; kx < ws.w; ++kx) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - ph;
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pw;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                ix >= static_cast<std::ptrdiff_t>(width)) {
              continue;
            }
            m((c * h + oy) * width + ox, (c * h + static_cast<std::size_t>(iy)) * width +
                                              static_cast<std::size_t>(ix)) += w.at(c, 0, ky, kx);
          }
  return m;
}

Matrix random_spd_dw_jacobian(std::size_t channels, std::size_t h, std::size_t w,
                              double lambda_min, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const std::size_t plane = h * w;
  Matrix out(channels * plane, channels * plane);
  for (std::size_t c = 0; c < channels; ++c) {
    Tensor f(Shape{1, 1, 3, 3});
    for (std::size_t k = 0; k < 5; ++k) {
      const auto v = static_cast<float>(g(rng));
      f[k] = v;
      f[8 - k] = v;
    }
    Matrix k = dw_conv_matrix(f, h, w);
    const double shift = lambda_min - symmetric_eigenvalues(k).back();
    for (std::size_t i = 0; i < plane; ++i) k(i, i) += shift;
    for (std::size_t i = 0; i < plane; ++i)
      for (std::size_t j = 0; j < plane; ++j) out(c * plane + i, c * plane + j) = k(i, j);
  }
  return out;
}

Matrix jacobian_of_block(const BlockFn& f, const Tensor& x0) {
  const Tensor y0 = f(x0);
  const std::size_t n = x0.size();
  if (y0.size() != n) {
    throw UsageError("jacobian_of_block: output size " + std::to_string(y0.size()) +
                     " differs from input size " + std::to_string(n));
  }
  if (n > 512) throw UsageError("jacobian_of_block: dimension above 512");
  // The block evaluates in float, so the step is sized by float epsilon.
  const double cbrt_eps = std::cbrt(static_cast<double>(std::numeric_limits<float>::epsilon()));
  Matrix jac(n, n);
  Tensor x = x0;
  for (std::size_t j = 0; j < n; ++j) {
    const float xj = x0[j];
    const double h = cbrt_eps * std::max(1.0, static_cast<double>(std::abs(xj)));
    const auto xp = static_cast<float>(xj + h), xm = static_cast<float>(xj - h);
    x[j] = xp;
    const Tensor yp = f(x);
    x[j] = xm;
    const Tensor ym = f(x);
    x[j] = xj;
    const double step = static_cast<double>(xp) - static_cast<double>(xm);
    for (std::size_t i = 0; i < n; ++i) {
      jac(i, j) = (static_cast<double>(yp[i]) - static_cast<double>(ym[i])) / step;
    }
  }
  return jac;
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& u : basis) {
    const double d = dot(u, v);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= d * u[i];
  }
}

}  // namespace

HessianResult hessian_topk(const HvpFn& hvp, std::size_t dim, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter, double tol) {
  if (k == 0 || k > 10) throw UsageError("hessian_topk: k must be in [1, 10]");
  if (k > dim) throw UsageError("hessian_topk: k exceeds dimension");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  HessianResult r;
  for (std::size_t e = 0; e < k; ++e) {
    std::vector<double> v(dim);
    for (auto& x : v) x = g(rng);
    orthogonalize(v, r.eigenvectors);
    double nv = norm(v);
    for (auto& x : v) x /= nv;
    double lambda = 0.0;
    bool converged = false;
    for (std::size_t it = 0; it < max_iter; ++it) {
      std::vector<double> w = hvp(v);
      orthogonalize(w, r.eigenvectors);
      const double next = dot(v, w);
      const double nw = norm(w);
      if (nw == 0.0) {
        lambda = 0.0;
        converged = true;
        break;
      }
      for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / nw;
      if (it > 0 && std::abs(next - lambda) <= tol * std::max(std::abs(next), 1e-12)) {
        lambda = next;
        converged = true;
        break;
      }
      lambda = next;
    }
    // Rayleigh quotient and residual against the undeflated operator.
    const std::vector<double> hv = hvp(v);
    lambda = dot(v, hv);
    double res = 0.0;
    for (std::size_t i = 0; i < dim; ++i) res += (hv[i] - lambda * v[i]) * (hv[i] - lambda * v[i]);
    res = std::sqrt(res);
    r.eigenvalues.push_back(lambda);
    r.residuals.push_back(res);
    r.converged.push_back(converged && res <= 1e-2 * std::max(1.0, std::abs(lambda)));
    r.eigenvectors.push_back(std::move(v));
  }
  return r;
}

namespace {

std::vector<Param*> select_params(Network& net, const ParamFilter& select) {
  std::vector<Param*> out;
  for (Param* p : net.params()) {
    if (select(*p)) out.push_back(p);
  }
  return out;
}

}  // namespace

bool all_weights(const Param& p) { return p.kind == ParamKind::Weight; }

HessianResult hessian_topk(Network& net, const Split& batch, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter, double tol, const ParamFilter& select,
                           double fd_step) {
  auto params = select_params(net, select);
  if (params.empty()) throw UsageError("hessian_topk: no parameters selected");
  std::vector<double> theta;
  for (const Param* p : params) theta.insert(theta.end(), p->value.begin(), p->value.end());
  const std::size_t dim = theta.size();

  net.linearize_quantizers(batch.x);
  auto set = [&](const std::vector<double>& v, double s) {
    std::size_t off = 0;
    for (Param* p : params) {
      for (auto& x : p->value) {
        x = static_cast<float>(theta[off] + s * v[off]);
        ++off;
      }
    }
  };
  auto grad = [&]() {
    loss_and_grad(net, batch);
    std::vector<double> g;
    g.reserve(dim);
    for (const Param* p : params) g.insert(g.end(), p->grad.begin(), p->grad.end());
    return g;
  };
  const double eps = fd_step;
  HvpFn hvp = [&](const std::vector<double>& v) {
    set(v, eps);
    const auto gp = grad();
    set(v, -eps);
    const auto gm = grad();
    std::vector<double> out(dim);
    for (std::size_t i = 0; i < dim; ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);
    return out;
  };
  HessianResult r;
  try {
    r = hessian_topk(hvp, dim, k, seed, max_iter, tol);
  } catch (...) {
    set(std::vector<double>(dim, 0.0), 0.0);
    net.clear_linearization();
    throw;
  }
  set(std::vector<double>(dim, 0.0), 0.0);
  net.clear_linearization();
  net.zero_grad();
  return r;
}

LandscapeMode landscape_mode_from_string(const std::string& s) {
  if (s == "2d-line" || s == "line") return LandscapeMode::Line;
  if (s == "2d-surface" || s == "surface") return LandscapeMode::Surface;
  throw UsageError("unknown landscape mode '" + s + "' (2d-line|2d-surface)");
}

namespace {

std::vector<std::vector<double>> filter_normalized_direction(const std::vector<Param*>& params,
                                                             std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> dir;
  for (const Param* p : params) {
    std::vector<double> d(p->value.size(), 0.0);
    if (p->kind == ParamKind::Weight) {
      const std::size_t filters = p->shape.n, per = p->value.size() / filters;
      for (std::size_t f = 0; f < filters; ++f) {
        double dn = 0.0, wn = 0.0;
        for (std::size_t i = f * per; i < (f + 1) * per; ++i) {
          d[i] = g(rng);
          dn += d[i] * d[i];
          wn += static_cast<double>(p->value[i]) * p->value[i];
        }
        const double s = dn > 0.0 ? std::sqrt(wn / dn) : 0.0;
        for (std::size_t i = f * per; i < (f + 1) * per; ++i) d[i] *= s;
      }
    }
    dir.push_back(std::move(d));
  }
  return dir;
}

}  // namespace

std::vector<LandscapePoint> landscape_grid(Network& net, const Split& data,
                                           std::uint64_t direction_seed, std::size_t n,
                                           double span, LandscapeMode mode) {
  if (n == 0 || n % 2 == 0) throw UsageError("landscape grid size must be odd");
  auto params = net.params();
  std::vector<std::vector<float>> theta;
  for (const Param* p : params) theta.push_back(p->value);
  std::mt19937_64 rng(direction_seed);
  const auto d1 = filter_normalized_direction(params, rng);
  const auto d2 = filter_normalized_direction(params, rng);

  auto coord = [&](std::size_t i) {
    if (n == 1 || i == n / 2) return 0.0;
    return -span + 2.0 * span * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  std::vector<LandscapePoint> grid;
  const std::size_t ny = mode == LandscapeMode::Surface ? n : 1;
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < n; ++ix) {
      const double x = coord(ix), y = mode == LandscapeMode::Surface ? coord(iy) : 0.0;
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& v = params[k]->value;
        if (x == 0.0 && y == 0.0) {
          v = theta[k];
          continue;
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = static_cast<float>(theta[k][i] + x * d1[k][i] + y * d2[k][i]);
        }
      }
      grid.push_back({x, y, evaluate(net, data).loss});
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = theta[k];
  return grid;
}

void write_landscape_csv(std::ostream& os, const std::vector<LandscapePoint>& grid) {
  os << "x,y,loss\n";
  char buf[96];
  for (const auto& p : grid) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.x, p.y, p.loss);
    os << buf;
  }
}

void write_spectrum_csv(std::ostream& os, const HessianResult& r) {
  os << "rank,eigenvalue,residual,converged\n";
  char buf[96];
  for (std::size_t i = 0; i < r.eigenvalues.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.3g,%d\n", i + 1, r.eigenvalues[i], r.residuals[i],
                  r.converged[i] ? 1 : 0);
    os << buf;
  }
}

}  // namespace bdnet
