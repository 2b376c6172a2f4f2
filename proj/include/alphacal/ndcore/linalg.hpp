#ifndef ALPHACAL_NDCORE_LINALG_HPP
#define ALPHACAL_NDCORE_LINALG_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/ndcore/matrix.hpp"

namespace alphacal {

/// Number of entries in the lower triangle of an n×n matrix.
constexpr std::size_t tril_size(std::size_t n) noexcept { return n * (n + 1) / 2; }

/// Offset of entry (i, j), j ≤ i, in a row-major packed lower triangle.
constexpr std::size_t tril_index(std::size_t i, std::size_t j) noexcept {
  return i * (i + 1) / 2 + j;
}

/// Side length n for which tril_size(n) == count; throws if there is none.
inline std::size_t tril_dim(std::size_t count) {
  std::size_t n = 0;
  while (tril_size(n) < count) ++n;
  if (tril_size(n) != count)
    throw ShapeError(std::to_string(count) + " is not a triangular number");
  return n;
}

inline Matrix unpack_tril(std::span<const double> packed, std::size_t n) {
  if (packed.size() != tril_size(n))
    throw ShapeError("packed triangle length " + std::to_string(packed.size()) +
                     " for n=" + std::to_string(n));
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) l(i, j) = packed[tril_index(i, j)];
  return l;
}

inline std::vector<double> pack_tril(const Matrix& l) {
  if (l.rows() != l.cols()) throw ShapeError("pack_tril: non-square " + l.shape_string());
  std::vector<double> out;
  out.reserve(tril_size(l.rows()));
  for (std::size_t i = 0; i < l.rows(); ++i)
    for (std::size_t j = 0; j <= i; ++j) out.push_back(l(i, j));
  return out;
}

/// Lower Cholesky factor L with L·Lᵀ = m.
inline Matrix cholesky(const Matrix& m) {
  const std::size_t n = m.rows();
  if (m.cols() != n) throw ShapeError("cholesky: non-square " + m.shape_string());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(m(i, j) - m(j, i)) > 1e-9 * std::max(1.0, std::abs(m(i, j))))
        throw DomainError("cholesky: matrix not symmetric at (" + std::to_string(i) +
                          "," + std::to_string(j) + ")");
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw DecompositionError(j, "cholesky: non-positive pivot " + std::to_string(d) +
                                      " at index " + std::to_string(j));
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

/// Solves L·x = b for lower-triangular L.
inline std::vector<double> solve_lower(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  if (b.size() != n) throw ShapeError("solve_lower: rhs length mismatch");
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

/// Solves Lᵀ·x = b for lower-triangular L.
inline std::vector<double> solve_lower_transposed(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  if (b.size() != n) throw ShapeError("solve_lower_transposed: rhs length mismatch");
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

/// ln det(L·Lᵀ) from a Cholesky factor.
inline double log_det_from_cholesky(const Matrix& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

inline double softplus(double x) {
  return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse requires y > 0");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

}  // namespace alphacal

#endif  // ALPHACAL_NDCORE_LINALG_HPP
