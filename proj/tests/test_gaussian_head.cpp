#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "alphacal/gaussian_head.hpp"
#include "alphacal/ndcore/tape.hpp"
#include "test_support.hpp"

using namespace alphacal;
using alphacal::testing::max_gradient_error;
using alphacal::testing::random_lower;
using alphacal::testing::random_matrix;

namespace {

const double kLn2Pi = std::log(2.0 * std::numbers::pi);

GaussianPrediction standard(std::size_t n) { return {std::vector<double>(n, 0.0), Matrix::identity(n)}; }

}  // namespace

TEST(FromRaw, ScalarSoftplusDiagonal) {
  const std::vector<double> raw{0.5, 0.0};
  const auto p = from_raw(raw, 1);
  EXPECT_EQ(p.mean, std::vector<double>{0.5});
  EXPECT_NEAR(p.chol(0, 0), std::log(2.0) + 1e-6, 1e-15);
}

TEST(FromRaw, TwoDimensionalZeros) {
  const std::vector<double> raw(5, 0.0);
  const auto p = from_raw(raw, 2);
  EXPECT_EQ(p.mean, (std::vector<double>{0.0, 0.0}));
  EXPECT_NEAR(p.chol(0, 0), 0.6931, 1e-4);
  EXPECT_NEAR(p.chol(1, 1), 0.6931, 1e-4);
  EXPECT_EQ(p.chol(1, 0), 0.0);
  EXPECT_EQ(p.chol(0, 1), 0.0);
}

TEST(FromRaw, OffDiagonalPassesThroughAndOrderIsRowMajor) {
  // n=2: μ0, μ1, L00, L10, L11.
  const std::vector<double> raw{1, 2, 0, -0.4, 0};
  const auto p = from_raw(raw, 2);
  EXPECT_EQ(p.chol(1, 0), -0.4);
}

TEST(FromRaw, WrongLengthIsShapeError) {
  const std::vector<double> raw(4, 0.0);
  EXPECT_THROW(from_raw(raw, 2), ShapeError);
}

TEST(Nll, ConstantOnlyAtMean) {
  const std::vector<double> y{0.0, 0.0};
  EXPECT_NEAR(nll(standard(2), y), kLn2Pi, 1e-12);
  EXPECT_NEAR(nll(standard(2), y), 1.8379, 1e-4);
}

TEST(Nll, UnitResidualAddsHalf) {
  const std::vector<double> y{1.0, 0.0};
  EXPECT_NEAR(nll(standard(2), y), kLn2Pi + 0.5, 1e-12);
}

TEST(Nll, QuadrupledCovarianceAddsLnFour) {
  GaussianPrediction p = standard(2);
  const std::vector<double> y{0.0, 0.0};
  const double base = nll(p, y);
  p.chol *= 2.0;
  EXPECT_NEAR(nll(p, y) - base, std::log(4.0), 1e-12);
}

TEST(Nll, MatchesDirectDensityEvaluation) {
  // Oracle: explicit 2×2 inverse and determinant.
  const GaussianPrediction p{{0.3, -1.0}, Matrix{{1.2, 0.0}, {0.4, 0.7}}};
  const Matrix s = p.covariance();
  const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
  const std::vector<double> y{1.0, 0.5};
  const double r0 = y[0] - 0.3, r1 = y[1] + 1.0;
  const double q = (s(1, 1) * r0 * r0 - 2 * s(0, 1) * r0 * r1 + s(0, 0) * r1 * r1) / det;
  EXPECT_NEAR(nll(p, y), 0.5 * std::log(det) + 0.5 * q + kLn2Pi, 1e-12);
}

TEST(Mahalanobis, Examples) {
  const std::vector<double> zero{0.0};
  EXPECT_EQ(mahalanobis_sq(GaussianPrediction{{0.0}, Matrix{{3.0}}}, zero), 0.0);
  const std::vector<double> three{3.0};
  EXPECT_NEAR(mahalanobis_sq(GaussianPrediction{{0.0}, Matrix{{3.0}}}, three), 1.0, 1e-15);
  const std::vector<double> ones{1.0, 1.0};
  EXPECT_NEAR(mahalanobis_sq(standard(2), ones), 2.0, 1e-15);
  EXPECT_THROW(mahalanobis_sq(standard(2), three), ShapeError);
}

TEST(Mahalanobis, StandardResidualsAverageToDimension) {
  Rng rng(21);
  Rng draw(22);
  const GaussianPrediction p{{1.0, -1.0, 0.5}, random_lower(3, rng)};
  double s = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) s += mahalanobis_sq(p, sample(p, draw));
  EXPECT_NEAR(s / n / 3.0, 1.0, 0.03);
}

TEST(Sample, DegenerateCovarianceReturnsMean) {
  GaussianPrediction p{{2.0, -3.0}, Matrix::identity(2)};
  p.chol *= 1e-6;
  Rng rng(1);
  const auto y = sample(p, rng);
  EXPECT_NEAR(y[0], 2.0, 1e-4);
  EXPECT_NEAR(y[1], -3.0, 1e-4);
}

TEST(Sample, EmpiricalCovarianceMatches) {
  Rng rng(8);
  const GaussianPrediction p{{0.5, 1.0, -2.0}, random_lower(3, rng)};
  const Matrix truth = p.covariance();
  const int n = 100000;
  Matrix acc(3, 3);
  std::vector<double> mean(3, 0.0);
  std::vector<std::vector<double>> draws;
  for (int i = 0; i < n; ++i) {
    draws.push_back(sample(p, rng));
    for (int j = 0; j < 3; ++j) mean[j] += draws.back()[j] / n;
  }
  for (const auto& d : draws)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) acc(i, j) += (d[i] - mean[i]) * (d[j] - mean[j]) / (n - 1);
  EXPECT_LT(frobenius_norm(acc - truth) / frobenius_norm(truth), 0.03);
}

TEST(Sample, FixedSeedIsReproducible) {
  const GaussianPrediction p{{0.0, 0.0}, Matrix{{1.0, 0.0}, {0.5, 2.0}}};
  Rng a(5), b(5);
  EXPECT_EQ(sample(p, a), sample(p, b));
}

// The same density built on the tape from raw head outputs, for gradients.
TEST(Nll, GradientWithRespectToRawHeadMatchesFiniteDifferences) {
  Rng rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + trial % 3;
    const Matrix raw = random_matrix(2, raw_head_size(n), rng, 0.7);
    const Matrix y = random_matrix(2, n, rng);
    auto f = [&](Tape&, const std::vector<Var>& v) {
      Var mean = ad::cols(v[0], 0, n);
      Var chol = ad::tril_positive_diagonal(ad::cols(v[0], n, tril_size(n)), n, kCholeskyFloor);
      return ad::sum(ad::gaussian_nll(mean, chol, y));
    };
    EXPECT_LT(max_gradient_error(f, {raw}), 1e-4);

    // Tape value agrees with the plain evaluation.
    Tape t;
    Var p = t.parameter(raw);
    const double taped = f(t, {p}).value()[0];
    const double plain = nll(from_raw(raw.row(0), n), y.row(0)) + nll(from_raw(raw.row(1), n), y.row(1));
    EXPECT_NEAR(taped, plain, 1e-10);
  }
}

TEST(Nll, GradientInMeanVanishesAtTarget) {
  Rng rng(31);
  const Matrix packed = [&] {
    const auto v = pack_tril(random_lower(3, rng));
    return Matrix(1, 6, v);
  }();
  const Matrix y = random_matrix(1, 3, rng);
  Tape t;
  Var mean = t.parameter(y);
  t.backward(ad::sum(ad::gaussian_nll(mean, t.constant(packed), y)));
  const Matrix g = t.grad(mean);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(PredictionCsv, HeaderAndRowRoundTrip) {
  EXPECT_EQ(prediction_csv_header(2), (std::vector<std::string>{"mu_0", "mu_1", "L_0_0", "L_1_0", "L_1_1"}));
  Rng rng(2);
  const GaussianPrediction p{{0.1, 0.2, 0.3}, random_lower(3, rng)};
  const auto row = prediction_to_row(p);
  EXPECT_EQ(row.size(), raw_head_size(3));
  EXPECT_EQ(prediction_from_row(row, 3), p);
}
