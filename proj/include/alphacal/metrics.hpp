#ifndef ALPHACAL_METRICS_HPP
#define ALPHACAL_METRICS_HPP

// Calibration and accuracy metrics for Gaussian and Monte Carlo predictions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "alphacal/bnn.hpp"
#include "alphacal/error.hpp"
#include "alphacal/gaussian_head.hpp"
#include "alphacal/losses.hpp"
#include "alphacal/ndcore/linalg.hpp"
#include "alphacal/ndcore/matrix.hpp"
#include "alphacal/ndcore/special.hpp"

namespace alphacal {

/// Paired nominal and empirical coverage probabilities.
struct CoverageCurve {
  std::vector<double> nominal;
  std::vector<double> empirical;

  std::size_t size() const noexcept { return nominal.size(); }
  friend bool operator==(const CoverageCurve&, const CoverageCurve&) = default;
};

enum class ThresholdMode { chi2, hotelling };

/// 0.01, 0.02, …, 0.99
inline std::vector<double> default_coverage_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 99; ++i) g.push_back(i / 100.0);
  return g;
}

namespace detail {

inline void check_grid(std::span<const double> grid) {
  if (grid.empty()) throw DomainError("coverage grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0 && grid[i] < 1.0))
      throw DomainError("coverage grid level outside (0, 1)");
    if (i > 0 && !(grid[i] > grid[i - 1]))
      throw DomainError("coverage grid must be strictly increasing");
  }
}

inline void check_aligned(std::size_t preds, const Matrix& targets) {
  if (preds == 0) throw DomainError("empty test set");
  if (targets.rows() != preds)
    throw ShapeError("predictions/targets misaligned: " + std::to_string(preds) + " vs " +
                     std::to_string(targets.rows()));
}

}  // namespace detail

/// Threshold on the squared Mahalanobis distance for nominal level `p`.
inline double coverage_threshold(std::size_t n, std::size_t d, double p, ThresholdMode mode) {
  if (mode == ThresholdMode::chi2) return chi2_quantile(static_cast<double>(n), p);
  return hotelling_threshold(static_cast<double>(n), static_cast<double>(d), p);
}

/// Fraction of targets inside each nominal confidence ellipsoid.
inline CoverageCurve coverage_curve(std::span<const GaussianPrediction> preds,
                                    const Matrix& targets, std::span<const double> grid,
                                    ThresholdMode mode = ThresholdMode::chi2) {
  detail::check_aligned(preds.size(), targets);
  detail::check_grid(grid);
  const std::size_t n = preds.front().dim();
  std::vector<double> maha(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) maha[i] = mahalanobis_sq(preds[i], targets.row(i));
  std::sort(maha.begin(), maha.end());
  CoverageCurve c;
  for (double level : grid) {
    const double thr = coverage_threshold(n, preds.size(), level, mode);
    const auto inside = std::upper_bound(maha.begin(), maha.end(), thr) - maha.begin();
    c.nominal.push_back(level);
    c.empirical.push_back(static_cast<double>(inside) / static_cast<double>(preds.size()));
  }
  return c;
}

/// Signed area between the curve and the diagonal, with (0,0) and (1,1)
/// appended. Negative means overconfident.
inline double area_score(const CoverageCurve& curve) {
  if (curve.size() < 2) throw DomainError("area_score needs at least two grid points");
  std::vector<double> x{0.0}, y{0.0};
  x.insert(x.end(), curve.nominal.begin(), curve.nominal.end());
  y.insert(y.end(), curve.empirical.begin(), curve.empirical.end());
  x.push_back(1.0);
  y.push_back(1.0);
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    const double d0 = y[i - 1] - x[i - 1];
    const double d1 = y[i] - x[i];
    area += 0.5 * (d0 + d1) * (x[i] - x[i - 1]);
  }
  return area;
}

/// Pooled coefficient of determination over all output dimensions.
inline double r_squared(const Matrix& means, const Matrix& targets) {
  if (!means.same_shape(targets)) throw ShapeError("r_squared: shape mismatch");
  if (targets.rows() < 2) throw DomainError("r_squared needs at least two targets");
  const std::size_t n = targets.cols();
  std::vector<double> ybar(n, 0.0);
  for (std::size_t i = 0; i < targets.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) ybar[j] += targets(i, j);
  for (double& v : ybar) v /= static_cast<double>(targets.rows());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < targets.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double r = means(i, j) - targets(i, j);
      const double c = targets(i, j) - ybar[j];
      ss_res += r * r;
      ss_tot += c * c;
    }
  if (!(ss_tot > 0.0)) throw DomainError("r_squared: targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

/// R² of each output dimension separately.
inline std::vector<double> r_squared_per_dim(const Matrix& means, const Matrix& targets) {
  if (!means.same_shape(targets)) throw ShapeError("r_squared: shape mismatch");
  std::vector<double> out;
  for (std::size_t j = 0; j < targets.cols(); ++j) {
    Matrix m(targets.rows(), 1), t(targets.rows(), 1);
    for (std::size_t i = 0; i < targets.rows(); ++i) {
      m(i, 0) = means(i, j);
      t(i, 0) = targets(i, j);
    }
    out.push_back(r_squared(m, t));
  }
  return out;
}

inline Matrix means_matrix(std::span<const GaussianPrediction> preds) {
  if (preds.empty()) return Matrix();
  Matrix m(preds.size(), preds.front().dim());
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = preds[i].mean[j];
  return m;
}

struct UncertaintyDecomposition {
  Matrix aleatoric;  ///< mean of per-sample covariances
  Matrix epistemic;  ///< unbiased covariance of per-sample means
  Matrix total;
};

inline UncertaintyDecomposition decompose_uncertainty(const McPredictionSet& mc) {
  if (mc.k() == 0) throw DomainError("decompose_uncertainty: empty prediction set");
  const std::size_t n = mc.dim();
  const double k = static_cast<double>(mc.k());
  UncertaintyDecomposition u{Matrix(n, n), Matrix(n, n), Matrix()};
  std::vector<double> mbar(n, 0.0);
  for (const auto& s : mc.samples) {
    u.aleatoric += s.covariance();
    for (std::size_t i = 0; i < n; ++i) mbar[i] += s.mean[i];
  }
  u.aleatoric *= 1.0 / k;
  for (double& v : mbar) v /= k;
  if (mc.k() > 1) {
    for (const auto& s : mc.samples)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          u.epistemic(i, j) += (s.mean[i] - mbar[i]) * (s.mean[j] - mbar[j]);
    u.epistemic *= 1.0 / (k - 1.0);
  }
  u.total = u.aleatoric + u.epistemic;
  return u;
}

/// Mean of the per-sample means.
inline std::vector<double> mixture_mean(const McPredictionSet& mc) {
  std::vector<double> m(mc.dim(), 0.0);
  for (const auto& s : mc.samples)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += s.mean[i];
  for (double& v : m) v /= static_cast<double>(mc.k());
  return m;
}

/// Moment-matched Gaussian 𝒩(mixture mean, aleatoric + epistemic).
inline GaussianPrediction predictive_gaussian(const McPredictionSet& mc) {
  return from_covariance(mixture_mean(mc), decompose_uncertainty(mc).total);
}

inline std::vector<GaussianPrediction> predictive_gaussians(std::span<const McPredictionSet> mcs) {
  std::vector<GaussianPrediction> out;
  out.reserve(mcs.size());
  for (const auto& mc : mcs) out.push_back(predictive_gaussian(mc));
  return out;
}

/// Mean over test points of trace(epistemic covariance).
inline double mean_epistemic_trace(std::span<const McPredictionSet> mcs) {
  if (mcs.empty()) throw DomainError("mean_epistemic_trace: empty test set");
  double s = 0.0;
  for (const auto& mc : mcs) s += trace(decompose_uncertainty(mc).epistemic);
  return s / static_cast<double>(mcs.size());
}

/// Mean negative log density of single-Gaussian predictions.
inline double test_nll(std::span<const GaussianPrediction> preds, const Matrix& targets) {
  detail::check_aligned(preds.size(), targets);
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += nll(preds[i], targets.row(i));
  return s / static_cast<double>(preds.size());
}

/// −ln[(1/K) Σ_k p(y | x, ŵ_k)] for one Monte Carlo mixture.
inline double mixture_nll(const McPredictionSet& mc, std::span<const double> y) {
  std::vector<double> ll;
  ll.reserve(mc.k());
  for (const auto& s : mc.samples) ll.push_back(-nll(s, y));
  return -logmeanexp(ll);
}

/// Mean mixture negative log density over the test set.
inline double test_nll(std::span<const McPredictionSet> mcs, const Matrix& targets) {
  detail::check_aligned(mcs.size(), targets);
  double s = 0.0;
  for (std::size_t i = 0; i < mcs.size(); ++i) s += mixture_nll(mcs[i], targets.row(i));
  return s / static_cast<double>(mcs.size());
}

/// Closed interval [lo, hi].
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
  double width() const noexcept { return hi - lo; }
};

/// Histogram of scalar posterior samples with Freedman–Diaconis bins, used to
/// grow intervals around the mode.
class ModeHistogram {
 public:
  explicit ModeHistogram(std::span<const double> samples) {
    if (samples.empty()) throw DomainError("mode_interval: no samples");
    std::vector<double> s(samples.begin(), samples.end());
    std::sort(s.begin(), s.end());
    lo_ = s.front();
    const double range = s.back() - lo_;
    n_ = static_cast<double>(s.size());
    if (!(range > 1e-12 * std::max(1.0, std::abs(lo_)))) {
      degenerate_ = true;
      hi_ = s.back();
      return;
    }
    auto quantile = [&](double q) {
      const double pos = q * (n_ - 1.0);
      const auto i = static_cast<std::size_t>(pos);
      const double f = pos - static_cast<double>(i);
      return i + 1 < s.size() ? s[i] * (1.0 - f) + s[i + 1] * f : s[i];
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    std::size_t bins = iqr > 0.0
                           ? static_cast<std::size_t>(std::ceil(range / (2.0 * iqr / std::cbrt(n_))))
                           : static_cast<std::size_t>(std::ceil(std::log2(n_))) + 1;
    bins = std::clamp<std::size_t>(bins, 1, s.size());
    width_ = range / static_cast<double>(bins);
    count_.assign(bins, 0.0);
    for (double v : s) {
      const auto b = static_cast<std::size_t>((v - lo_) / width_);
      count_[std::min(b, bins - 1)] += 1.0;
    }
    mode_ = static_cast<std::size_t>(std::max_element(count_.begin(), count_.end()) -
                                     count_.begin());
  }

  /// Interval around the mode holding a `level` fraction of the samples.
  /// The interval grows one bin at a time toward the heavier neighbour; the
  /// final bin is entered only as far as the remaining mass requires,
  /// assuming uniform density within a bin.
  Interval interval(double level) const {
    if (degenerate_) return Interval{lo_, hi_};
    const std::size_t bins = count_.size();
    const double target = level * n_;
    std::size_t left = mode_, right = mode_;
    double mass = count_[mode_];
    double lo_edge = lo_ + static_cast<double>(left) * width_;
    double hi_edge = lo_ + static_cast<double>(right + 1) * width_;
    if (mass >= target) {
      const double half = 0.5 * (target / mass) * width_;
      const double mid = 0.5 * (lo_edge + hi_edge);
      return Interval{mid - half, mid + half};
    }
    while (mass < target) {
      const bool can_left = left > 0;
      const bool can_right = right + 1 < bins;
      if (!can_left && !can_right) break;
      const double cl = can_left ? count_[left - 1] : -1.0;
      const double cr = can_right ? count_[right + 1] : -1.0;
      const bool go_left = cl >= cr;
      const double add = go_left ? cl : cr;
      const double need = target - mass;
      if (add >= need && add > 0.0) {
        const double frac = need / add;
        if (go_left)
          lo_edge -= frac * width_;
        else
          hi_edge += frac * width_;
        break;
      }
      mass += add;
      if (go_left) {
        --left;
        lo_edge = lo_ + static_cast<double>(left) * width_;
      } else {
        ++right;
        hi_edge = lo_ + static_cast<double>(right + 1) * width_;
      }
    }
    return Interval{lo_edge, hi_edge};
  }

  std::size_t bin_count() const noexcept { return count_.size(); }

 private:
  double lo_ = 0.0;
  double hi_ = 0.0;
  double width_ = 0.0;
  double n_ = 0.0;
  bool degenerate_ = false;
  std::vector<double> count_;
  std::size_t mode_ = 0;
};

inline Interval mode_interval(std::span<const double> samples, double level) {
  return ModeHistogram(samples).interval(level);
}

/// Coverage of per-dimension mode intervals built from posterior samples.
/// `samples[i]` is S×N (S ≥ 100 draws for test point i); coverage pools all
/// (point, dimension) pairs.
inline CoverageCurve hdi_coverage(std::span<const Matrix> samples, const Matrix& targets,
                                  std::span<const double> grid) {
  detail::check_aligned(samples.size(), targets);
  detail::check_grid(grid);
  const std::size_t n = targets.cols();
  std::vector<double> inside(grid.size(), 0.0);
  std::vector<double> column;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Matrix& s = samples[i];
    if (s.cols() != n) throw ShapeError("hdi_coverage: sample width mismatch");
    if (s.rows() < 100) throw DomainError("hdi_coverage needs at least 100 samples per point");
    for (std::size_t j = 0; j < n; ++j) {
      column.resize(s.rows());
      for (std::size_t r = 0; r < s.rows(); ++r) column[r] = s(r, j);
      const double y = targets(i, j);
      const ModeHistogram hist(column);
      for (std::size_t g = 0; g < grid.size(); ++g) {
        const Interval iv = hist.interval(grid[g]);
        const bool in = iv.width() == 0.0 ? std::abs(y - iv.lo) <= 1e-12 : iv.contains(y);
        if (in) inside[g] += 1.0;
      }
    }
  }
  CoverageCurve c;
  const double total = static_cast<double>(samples.size() * n);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    c.nominal.push_back(grid[g]);
    c.empirical.push_back(inside[g] / total);
  }
  return c;
}

}  // namespace alphacal

#endif  // ALPHACAL_METRICS_HPP
