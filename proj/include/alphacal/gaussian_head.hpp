#ifndef ALPHACAL_GAUSSIAN_HEAD_HPP
#define ALPHACAL_GAUSSIAN_HEAD_HPP

// Multivariate Gaussian predictive output parameterized by a mean and the
// lower Cholesky factor of its covariance.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/ndcore/linalg.hpp"
#include "alphacal/ndcore/matrix.hpp"
#include "alphacal/ndcore/rng.hpp"

namespace alphacal {

/// Lower bound added to softplus on the Cholesky diagonal.
inline constexpr double kCholeskyFloor = 1e-6;

/// Length of a raw head output for `n` targets: n means then the packed triangle.
constexpr std::size_t raw_head_size(std::size_t n) noexcept { return n + tril_size(n); }

/// Output dimension N whose raw head output has `width` entries.
inline std::size_t output_dim_for_head(std::size_t width) {
  std::size_t n = 1;
  while (raw_head_size(n) < width) ++n;
  if (raw_head_size(n) != width)
    throw ShapeError("head width " + std::to_string(width) + " is not N + N(N+1)/2");
  return n;
}

struct GaussianPrediction {
  std::vector<double> mean;
  Matrix chol;  ///< lower-triangular, positive diagonal

  std::size_t dim() const noexcept { return mean.size(); }

  Matrix covariance() const { return matmul_nt(chol, chol); }

  friend bool operator==(const GaussianPrediction&, const GaussianPrediction&) = default;
};

inline void check_dims(const GaussianPrediction& pred, std::span<const double> y) {
  if (y.size() != pred.dim())
    throw ShapeError("target length " + std::to_string(y.size()) + " != prediction dim " +
                     std::to_string(pred.dim()));
}

/// Builds a prediction from N means followed by row-major lower-triangle
/// entries. Diagonal entries pass through softplus plus kCholeskyFloor.
inline GaussianPrediction from_raw(std::span<const double> raw, std::size_t n) {
  if (raw.size() != raw_head_size(n))
    throw ShapeError("raw head length " + std::to_string(raw.size()) + " != " +
                     std::to_string(raw_head_size(n)) + " for n=" + std::to_string(n));
  GaussianPrediction p;
  p.mean.assign(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(n));
  p.chol = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = raw[n + tril_index(i, j)];
      p.chol(i, j) = (i == j) ? softplus(v) + kCholeskyFloor : v;
    }
  return p;
}

/// Builds a prediction from a mean and a full covariance matrix.
inline GaussianPrediction from_covariance(std::vector<double> mean, const Matrix& cov) {
  if (cov.rows() != mean.size()) throw ShapeError("from_covariance: dimension mismatch");
  return GaussianPrediction{std::move(mean), cholesky(cov)};
}

/// (y−μ)ᵀΣ⁻¹(y−μ) by forward substitution.
inline double mahalanobis_sq(const GaussianPrediction& pred, std::span<const double> y) {
  check_dims(pred, y);
  std::vector<double> r(y.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = y[i] - pred.mean[i];
  const auto z = solve_lower(pred.chol, r);
  double s = 0.0;
  for (double v : z) s += v * v;
  return s;
}

/// Negative log density, including the (N/2)·ln 2π constant.
inline double nll(const GaussianPrediction& pred, std::span<const double> y) {
  const double n = static_cast<double>(pred.dim());
  return 0.5 * log_det_from_cholesky(pred.chol) + 0.5 * mahalanobis_sq(pred, y) +
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

/// μ + chol·z with z standard normal.
inline std::vector<double> sample(const GaussianPrediction& pred, Rng& rng) {
  const std::size_t n = pred.dim();
  std::vector<double> z(n);
  for (double& v : z) v = rng.normal();
  std::vector<double> out = pred.mean;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) out[i] += pred.chol(i, j) * z[j];
  return out;
}

/// CSV header for prediction rows: mu_0..mu_{N-1}, then L_i_j for j ≤ i.
inline std::vector<std::string> prediction_csv_header(std::size_t n) {
  std::vector<std::string> h;
  for (std::size_t i = 0; i < n; ++i) h.push_back("mu_" + std::to_string(i));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      h.push_back("L_" + std::to_string(i) + "_" + std::to_string(j));
  return h;
}

inline std::vector<double> prediction_to_row(const GaussianPrediction& p) {
  std::vector<double> row = p.mean;
  const auto packed = pack_tril(p.chol);
  row.insert(row.end(), packed.begin(), packed.end());
  return row;
}

inline GaussianPrediction prediction_from_row(std::span<const double> row, std::size_t n) {
  if (row.size() != raw_head_size(n)) throw ShapeError("prediction row has wrong length");
  GaussianPrediction p;
  p.mean.assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n));
  p.chol = unpack_tril(row.subspan(n), n);
  return p;
}

}  // namespace alphacal

#endif  // ALPHACAL_GAUSSIAN_HEAD_HPP
