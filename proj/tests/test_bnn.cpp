#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "alphacal/bnn.hpp"
#include "test_support.hpp"

using namespace alphacal;
using alphacal::testing::max_gradient_error;
using alphacal::testing::random_matrix;

namespace {

VariationalLayer make_layer(std::size_t in, std::size_t out, double sigma, Rng& rng) {
  VariationalLayer l = VariationalLayer::create(in, out, 1.0, rng);
  const double rho = softplus_inverse(sigma);
  for (double& v : l.weight_rho.data()) v = rho;
  for (double& v : l.bias_rho.data()) v = rho;
  for (double& v : l.bias_mean.data()) v = rng.normal();
  return l;
}

BnnModel small_model(double sigma, std::uint64_t seed) {
  Rng rng(seed);
  BnnModel m = BnnModel::create(Architecture{2, {4}, 1, 0.3}, 1.0, rng);
  const double rho = softplus_inverse(sigma);
  for (auto& l : m.layers) {
    for (double& v : l.weight_rho.data()) v = rho;
    for (double& v : l.bias_rho.data()) v = rho;
  }
  return m;
}

Matrix deterministic(const VariationalLayer& l, const Matrix& x) {
  Matrix out = matmul(x, l.weight_mean);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += l.bias_mean(0, j);
  return out;
}

}  // namespace

TEST(VariationalLayer, CreateShapesAndInitialSigma) {
  Rng rng(1);
  const auto l = VariationalLayer::create(5, 7, 1.0, rng);
  EXPECT_EQ(l.weight_mean.rows(), 5u);
  EXPECT_EQ(l.weight_mean.cols(), 7u);
  EXPECT_TRUE(l.weight_rho.same_shape(l.weight_mean));
  EXPECT_EQ(l.bias_mean.cols(), 7u);
  for (double r : l.weight_rho.data()) EXPECT_NEAR(softplus(r), kInitialPosteriorSigma, 1e-12);
  for (double w : l.weight_mean.data()) EXPECT_LE(std::abs(w), 1.0 / std::sqrt(5.0));
  EXPECT_THROW(VariationalLayer::create(0, 3, 1.0, rng), ShapeError);
  EXPECT_THROW(VariationalLayer::create(3, 3, 0.0, rng), DomainError);
}

TEST(BnnModel, FinalWidthIsHeadSize) {
  Rng rng(2);
  const auto m = BnnModel::create(Architecture{}, 1.0, rng);
  EXPECT_EQ(m.layers.size(), 3u);
  EXPECT_EQ(m.layers.back().out_dim(), 9u);
  EXPECT_EQ(m.architecture(), Architecture{});
  BnnModel broken = m;
  broken.layers[1].weight_mean = Matrix(63, 64);
  broken.layers[1].weight_rho = Matrix(63, 64);
  EXPECT_THROW(broken.validate(), ShapeError);
}

TEST(ForwardFlipout, ShapeMismatchThrows) {
  Rng rng(3);
  const auto l = make_layer(4, 2, 0.1, rng);
  EXPECT_THROW(forward_flipout(l, Matrix(3, 5), rng), ShapeError);
}

TEST(ForwardFlipout, ZeroVarianceLimitIsDeterministic) {
  Rng rng(4);
  auto l = make_layer(6, 3, 0.1, rng);
  for (double& v : l.weight_rho.data()) v = -40.0;
  for (double& v : l.bias_rho.data()) v = -40.0;
  const Matrix x = random_matrix(5, 6, rng);
  const Matrix out = forward_flipout(l, x, rng);
  const Matrix det = deterministic(l, x);
  for (std::size_t k = 0; k < out.size(); ++k) EXPECT_NEAR(out[k], det[k], 1e-4);
}

TEST(ForwardFlipout, MomentsMatchAnalyticPerturbation) {
  Rng rng(5);
  auto l = make_layer(5, 3, 0.2, rng);
  // Heterogeneous σ so the variance formula is exercised per weight.
  for (double& v : l.weight_rho.data()) v = softplus_inverse(rng.uniform(0.05, 0.4));
  const Matrix x = random_matrix(4, 5, rng);
  const Matrix det = deterministic(l, x);
  const int passes = 10000;
  Matrix sum(4, 3), sum_sq(4, 3);
  for (int p = 0; p < passes; ++p) {
    const Matrix out = forward_flipout(l, x, rng);
    for (std::size_t k = 0; k < out.size(); ++k) {
      sum[k] += out[k];
      sum_sq[k] += out[k] * out[k];
    }
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double analytic = std::pow(softplus(l.bias_rho(0, j)), 2);
      for (std::size_t a = 0; a < 5; ++a)
        analytic += x(i, a) * x(i, a) * std::pow(softplus(l.weight_rho(a, j)), 2);
      const double mean = sum(i, j) / passes;
      const double var = sum_sq(i, j) / passes - mean * mean;
      EXPECT_NEAR(mean, det(i, j), 0.02 * std::max(std::abs(det(i, j)), std::sqrt(analytic)));
      EXPECT_NEAR(var / analytic, 1.0, 0.05) << i << "," << j;
    }
}

TEST(ForwardFlipout, IdenticalInputsHaveExchangeableOutputs) {
  Rng rng(6);
  const auto l = make_layer(4, 2, 0.3, rng);
  const Matrix one = random_matrix(1, 4, rng);
  Matrix x(6, 4);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) x(i, j) = one(0, j);
  const int passes = 20000;
  Matrix sum(6, 2), sum_sq(6, 2);
  for (int p = 0; p < passes; ++p) {
    const Matrix out = forward_flipout(l, x, rng);
    for (std::size_t k = 0; k < out.size(); ++k) {
      sum[k] += out[k];
      sum_sq[k] += out[k] * out[k];
    }
  }
  for (std::size_t j = 0; j < 2; ++j) {
    const double v0 = sum_sq(0, j) / passes - std::pow(sum(0, j) / passes, 2);
    for (std::size_t i = 1; i < 6; ++i) {
      const double vi = sum_sq(i, j) / passes - std::pow(sum(i, j) / passes, 2);
      // Sample variances of 2·10⁴ draws: relative SE ≈ 1%, so 6% is many SEs.
      EXPECT_NEAR(vi / v0, 1.0, 0.06);
    }
  }
}

TEST(ForwardFlipout, GradientWithFrozenNoiseMatchesFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 2 + trial % 3, out = 1 + trial % 4, batch = 3;
    const auto layer = make_layer(in, out, rng.uniform(0.05, 0.5), rng);
    const FlipoutNoise noise = draw_flipout_noise(layer, batch, rng);
    const Matrix x = random_matrix(batch, in, rng);
    const Matrix weights = random_matrix(batch, out, rng);
    auto f = [&](Tape& t, const std::vector<Var>& v) {
      LayerVars l{v[0], v[1], v[2], v[3], 1.0};
      return ad::sum(ad::mul(ad::leaky_relu(forward_flipout(l, v[4], noise), 0.3),
                             t.constant(weights)));
    };
    EXPECT_LT(max_gradient_error(f, {layer.weight_mean, layer.weight_rho, layer.bias_mean,
                                     layer.bias_rho, x}),
              1e-4);
  }
}

TEST(ForwardMean, HandComputedAffineModel) {
  BnnModel m;
  m.output_dim = 1;
  VariationalLayer l;
  l.weight_mean = Matrix{{1.0, 0.5}, {-2.0, 0.0}};
  l.weight_rho = Matrix(2, 2, 3.0);  // ignored by the mean pass
  l.bias_mean = Matrix{{0.25, -1.0}};
  l.bias_rho = Matrix(1, 2, 3.0);
  m.layers.push_back(l);
  m.validate();
  const auto p = forward_mean(m, Matrix{{2.0, 1.0}});
  ASSERT_EQ(p.size(), 1u);
  EXPECT_DOUBLE_EQ(p[0].mean[0], 2.0 - 2.0 + 0.25);
  EXPECT_NEAR(p[0].chol(0, 0), softplus(1.0 - 1.0) + kCholeskyFloor, 1e-15);
}

TEST(ForwardMean, IdenticalInputsGiveIdenticalOutputs) {
  const auto m = small_model(0.2, 8);
  const auto p = forward_mean(m, Matrix{{0.3, -0.7}, {0.3, -0.7}});
  EXPECT_EQ(p[0], p[1]);
  EXPECT_EQ(forward_mean(m, Matrix{{0.3, -0.7}})[0], p[0]);
}

TEST(McPredict, SingleSampleZeroVarianceIsDeterministicPrediction) {
  const auto m = small_model(1e-12, 9);
  Rng rng(10);
  const std::vector<double> x{0.4, 1.1};
  const auto set = mc_predict(m, x, 1, rng);
  ASSERT_EQ(set.k(), 1u);
  const auto det = forward_mean(m, Matrix::row_vector(x))[0];
  EXPECT_NEAR(set.samples[0].mean[0], det.mean[0], 1e-8);
  EXPECT_NEAR(set.samples[0].chol(0, 0), det.chol(0, 0), 1e-8);
}

TEST(McPredict, FixedSeedIsReproducible) {
  const auto m = small_model(0.2, 11);
  const std::vector<double> x{0.4, 1.1};
  Rng a(12), b(12);
  const auto s1 = mc_predict(m, x, 64, a);
  const auto s2 = mc_predict(m, x, 64, b);
  ASSERT_EQ(s1.k(), 64u);
  for (std::size_t k = 0; k < 64; ++k) EXPECT_EQ(s1.samples[k], s2.samples[k]);
  Rng c(12);
  EXPECT_THROW(mc_predict(m, x, 0, c), DomainError);
}

TEST(McPredict, MeanSpreadGrowsWithPosteriorSigma) {
  const std::vector<double> x{0.4, 1.1};
  auto spread = [&](double sigma) {
    const auto m = small_model(sigma, 13);
    Rng rng(14);
    const auto set = mc_predict(m, x, 256, rng);
    double mean = 0.0, sq = 0.0;
    for (const auto& p : set.samples) {
      mean += p.mean[0] / 256.0;
      sq += p.mean[0] * p.mean[0] / 256.0;
    }
    return sq - mean * mean;
  };
  EXPECT_GT(spread(0.3), spread(0.05));
}

TEST(McPredict, DoublingSamplesHalvesMixtureMeanVariance) {
  const auto m = small_model(0.3, 15);
  const std::vector<double> x{0.4, 1.1};
  Rng rng(16);
  auto variance_of_mixture_mean = [&](std::size_t k) {
    const int reps = 10000;
    double s = 0.0, sq = 0.0;
    for (int r = 0; r < reps; ++r) {
      const auto set = mc_predict(m, x, k, rng);
      double mu = 0.0;
      for (const auto& p : set.samples) mu += p.mean[0] / static_cast<double>(k);
      s += mu;
      sq += mu * mu;
    }
    return sq / reps - (s / reps) * (s / reps);
  };
  const double v4 = variance_of_mixture_mean(4);
  const double v8 = variance_of_mixture_mean(8);
  // Standard error scales as 1/√K: the variance ratio is 2 (SE ratio √2).
  EXPECT_NEAR(v4 / v8, 2.0, 0.2);
}

TEST(BindLayer, MeanColumnsExposesOnlyLeadingColumns) {
  Rng rng(17);
  const auto l = make_layer(3, 5, 0.1, rng);
  Tape t;
  std::vector<Var> leaves;
  const LayerVars v = bind_layer(t, l, Trainable::mean_columns, 2, &leaves);
  ASSERT_EQ(leaves.size(), 4u);
  EXPECT_EQ(leaves[0].cols(), 2u);
  EXPECT_EQ(leaves[2].cols(), 2u);
  EXPECT_EQ(v.weight_mean.value(), l.weight_mean);
  EXPECT_EQ(v.bias_rho.value(), l.bias_rho);
}

TEST(Checkpoint, JsonRoundTripIsExact) {
  Rng rng(18);
  const auto m = BnnModel::create(Architecture{3, {5, 4}, 2, 0.3}, 0.7, rng);
  const auto back = model_from_json(nlohmann::json::parse(model_to_json(m).dump()));
  EXPECT_EQ(back, m);
}

TEST(Checkpoint, RejectsWrongFormatAndInconsistentShapes) {
  Rng rng(19);
  const auto m = BnnModel::create(Architecture{3, {5}, 2, 0.3}, 1.0, rng);
  auto j = model_to_json(m);
  j["format"] = "something-else";
  EXPECT_THROW(model_from_json(j), ParseError);
  j = model_to_json(m);
  j["layers"][0]["weight_mean"].erase(0);
  EXPECT_THROW(model_from_json(j), ParseError);
  j = model_to_json(m);
  j["architecture"]["hidden"] = {6};
  EXPECT_THROW(model_from_json(j), ParseError);
  j = model_to_json(m);
  j.erase("layers");
  EXPECT_THROW(model_from_json(j), ParseError);
}
