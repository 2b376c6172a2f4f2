#ifndef ALPHACAL_NDCORE_SPECIAL_HPP
#define ALPHACAL_NDCORE_SPECIAL_HPP

// Distribution functions needed for coverage thresholds.

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "alphacal/error.hpp"

namespace alphacal {

namespace detail {

// Series for P(a, x), valid for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double sum = 1.0 / a;
  double term = sum;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Lentz continued fraction for Q(a, x), valid for x ≥ a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

// Continued fraction for the incomplete beta function.
inline double beta_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m < 10000; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return h;
}

// Smallest x ≥ 0 with cdf(x) ≥ p, by bracketing then bisection to machine
// resolution.
inline double invert_cdf(const std::function<double(double)>& cdf, double p) {
  double lo = 0.0;
  double hi = 1.0;
  while (cdf(hi) < p) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e300) throw DomainError("invert_cdf: quantile not bracketed");
  }
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (cdf(mid) < p)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw DomainError("gamma_p requires a > 0, x >= 0");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_fraction(a, x);
}

/// Regularized incomplete beta I_x(a, b).
inline double beta_inc(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0) || x < 0.0 || x > 1.0)
    throw DomainError("beta_inc requires a, b > 0 and x in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_fraction(b, a, 1.0 - x) / b;
}

inline double chi2_cdf(double k, double x) {
  if (x <= 0.0) return 0.0;
  return gamma_p(0.5 * k, 0.5 * x);
}

/// CDF of the F(d1, d2) distribution.
inline double f_cdf(double d1, double d2, double x) {
  if (x <= 0.0) return 0.0;
  return beta_inc(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2));
}

/// x with χ²_k CDF(x) = p.
inline double chi2_quantile(double k, double p) {
  if (!(k >= 1.0)) throw DomainError("chi2_quantile: degrees of freedom must be >= 1");
  if (!(p >= 0.0 && p < 1.0))
    throw DomainError("chi2_quantile: probability " + std::to_string(p) + " outside [0, 1)");
  if (p == 0.0) return 0.0;
  return detail::invert_cdf([k](double x) { return chi2_cdf(k, x); }, p);
}

inline double f_quantile(double d1, double d2, double p) {
  if (!(d1 > 0.0) || !(d2 > 0.0)) throw DomainError("f_quantile: degrees of freedom must be > 0");
  if (!(p >= 0.0 && p < 1.0))
    throw DomainError("f_quantile: probability " + std::to_string(p) + " outside [0, 1)");
  if (p == 0.0) return 0.0;
  return detail::invert_cdf([d1, d2](double x) { return f_cdf(d1, d2, x); }, p);
}

/// Quantile of Hotelling's T²(k, d−1) statistic: k(d−1)/(d−k) · F_{k, d−k}(p).
inline double hotelling_threshold(double k, double d, double p) {
  if (!(k >= 1.0)) throw DomainError("hotelling_threshold: k must be >= 1");
  if (!(d > k)) throw DomainError("hotelling_threshold: sample count must exceed k");
  return k * (d - 1.0) / (d - k) * f_quantile(k, d - k, p);
}

}  // namespace alphacal

#endif  // ALPHACAL_NDCORE_SPECIAL_HPP
