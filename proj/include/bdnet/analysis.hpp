#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "bdnet/kernels.hpp"
#include "bdnet/model.hpp"
#include "bdnet/train.hpp"

namespace bdnet {

// ---- cost model --------------------------------------------------------

/// One multiply-accumulate counts as one operation. ops = bops / 64 + flops.
struct CostRow {
  std::string layer;
  std::string type;
  std::uint64_t bops = 0;
  std::uint64_t flops = 0;
  double ops = 0.0;
};

struct CostReport {
  std::vector<CostRow> rows;
  CostRow total;
};

CostRow count_ops(const ConvSpec& spec, const Shape& input, bool binary, std::size_t branches = 1,
                  const std::string& name = "conv");
CostReport count_ops(const Network& net);

/// The four operation-count rows for a 3x3 conv at 56x56 with 128 channels:
/// float regular, float depth-wise, binary regular, binary depth-wise.
std::vector<CostRow> table1_rows();

void write_cost_csv(std::ostream& os, const CostReport& report);

// ---- dense linear algebra ------------------------------------------------

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}
  static Matrix identity(std::size_t n);

  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  Matrix transpose() const;
  Matrix operator*(const Matrix& b) const;
  Matrix operator+(const Matrix& b) const;
  Matrix operator*(double s) const;
  double max_abs() const;
};

/// Singular values, descending (one-sided Jacobi).
std::vector<double> singular_values(const Matrix& m);
/// Eigenvalues of a symmetric matrix, descending (cyclic Jacobi rotations).
std::vector<double> symmetric_eigenvalues(const Matrix& m);

// ---- conditioning ----------------------------------------------------------

inline constexpr double kInfiniteKappa = std::numeric_limits<double>::infinity();

struct ConditionReport {
  std::vector<double> spectrum_j;        // singular values of J, descending
  std::vector<double> spectrum_j_prime;  // of J' = J + alpha I
  double alpha = 0.0;
  double kappa_j = 0.0;
  double kappa_j_prime = 0.0;
  double kappa_h = 0.0;        // kappa_j^2
  double kappa_h_prime = 0.0;  // kappa_j_prime^2
  /// (1 + alpha/l1) * (ln/(ln + alpha)) * kappa_j
  double factored = 0.0;
  /// (ln/alpha + ln/l1) * kappa_j
  double approx = 0.0;
  double approx_abs_error = 0.0;
};

/// kappa from singular values; a numerically singular J reports
/// kInfiniteKappa instead of throwing.
ConditionReport condition_numbers(const Matrix& j, double alpha);

/// Explicit Jacobian of a linear depth-wise conv (zero padding, stride 1) on
/// a C x H x W input.
Matrix dw_conv_matrix(const Tensor& w, std::size_t h, std::size_t width);

/// Symmetric positive definite depth-wise-structured Jacobian: each channel
/// gets a centrosymmetric 3x3 filter whose centre tap is shifted so the
/// smallest eigenvalue equals `lambda_min`.
Matrix random_spd_dw_jacobian(std::size_t channels, std::size_t h, std::size_t w,
                              double lambda_min, std::uint64_t seed);

// ---- Jacobians, Hessians, landscapes ---------------------------------------

using BlockFn = std::function<Tensor(const Tensor&)>;

/// Central finite-difference Jacobian of f at x0 (output rows, input
/// columns), step h = cbrt(eps) * max(1, |x|). Requires equal input and output
/// sizes of at most 512.
Matrix jacobian_of_block(const BlockFn& f, const Tensor& x0);

/// Hessian-vector product: v -> H v.
using HvpFn = std::function<std::vector<double>(const std::vector<double>&)>;

struct HessianResult {
  std::vector<double> eigenvalues;
  std::vector<double> residuals;  // ||Hv - lambda v|| / ||v||
  std::vector<bool> converged;
  std::vector<std::vector<double>> eigenvectors;
};

/// Top-k eigenvalues (by magnitude) via power iteration with deflation.
HessianResult hessian_topk(const HvpFn& hvp, std::size_t dim, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter = 200, double tol = 1e-6);

using ParamFilter = std::function<bool(const Param&)>;

/// Weight tensors of every layer (the default Hessian block).
bool all_weights(const Param& p);

/// Training-loss Hessian restricted to the parameters accepted by `select`,
/// on one batch, with quantizers linearized at the current point. HVPs use
/// central differences of the gradient.
HessianResult hessian_topk(Network& net, const Split& batch, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter = 100, double tol = 1e-4,
                           const ParamFilter& select = all_weights, double fd_step = 1e-3);

enum class LandscapeMode { Line, Surface };
LandscapeMode landscape_mode_from_string(const std::string& s);

struct LandscapePoint {
  double x, y, loss;
};

/// Loss on an n-point line or n x n surface spanning [-span, span] along
/// filter-normalized random directions. n must be odd.
std::vector<LandscapePoint> landscape_grid(Network& net, const Split& data,
                                           std::uint64_t direction_seed, std::size_t n,
                                           double span, LandscapeMode mode);

void write_landscape_csv(std::ostream& os, const std::vector<LandscapePoint>& grid);
void write_spectrum_csv(std::ostream& os, const HessianResult& r);

}  // namespace bdnet
