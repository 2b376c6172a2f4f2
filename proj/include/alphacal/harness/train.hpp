#ifndef ALPHACAL_HARNESS_TRAIN_HPP
#define ALPHACAL_HARNESS_TRAIN_HPP

// Training loop and the evaluation shared by the CLI and the sweep.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "alphacal/bnn.hpp"
#include "alphacal/calibration.hpp"
#include "alphacal/harness/config.hpp"
#include "alphacal/harness/csv.hpp"
#include "alphacal/harness/synthetic.hpp"
#include "alphacal/losses.hpp"
#include "alphacal/metrics.hpp"
#include "alphacal/ndcore/adam.hpp"
#include "alphacal/ndcore/rng.hpp"
#include "alphacal/ndcore/tape.hpp"

namespace alphacal::harness {

/// Seed for an independent sub-stream identified by (a, b).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  Rng r(base ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xc2b2ae3d27d4eb4fULL));
  return r.next_u64();
}

struct LossRow {
  std::size_t step = 0;
  LossReport report;
};

struct TrainResult {
  BnnModel model;  ///< checkpoint with the best validation NLL
  std::vector<LossRow> losses;
  double best_val_nll = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool diverged = false;
};

namespace detail {

inline void zero_columns_from(Matrix& g, std::size_t first) {
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = first; j < g.cols(); ++j) g(i, j) = 0.0;
}

}  // namespace detail

/// Pins the covariance outputs of the final layer to b·I: zero weight means,
/// zero off-diagonal biases, diagonal biases at softplus⁻¹(b − floor).
inline void pin_covariance_head(BnnModel& m, double b) {
  const std::size_t n = m.output_dim;
  auto& l = m.layers.back();
  for (std::size_t i = 0; i < l.in_dim(); ++i)
    for (std::size_t j = n; j < l.out_dim(); ++j) l.weight_mean(i, j) = 0.0;
  for (std::size_t j = n; j < l.out_dim(); ++j) l.bias_mean(0, j) = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    l.bias_mean(0, n + tril_index(i, i)) = softplus_inverse(b - kCholeskyFloor);
}

/// Trains a fresh model on `splits.train` with the variational objective
/// (alpha = nullopt) or BB-α, keeping the epoch with the lowest validation
/// mixture NLL. On a non-finite loss or gradient, training stops and the
/// best state so far is returned with `diverged` set.
inline TrainResult train(const ExperimentConfig& c, const Splits& splits,
                         std::optional<double> alpha, std::uint64_t seed) {
  if (alpha && *alpha == 0.0) throw DomainError("train: alpha 0 is the variational objective");
  Architecture arch;
  arch.input_dim = splits.train.x.cols();
  arch.output_dim = splits.train.y.cols();
  arch.hidden = c.hidden;
  Rng init_rng(derive_seed(seed, 1));
  Rng rng(derive_seed(seed, 2));
  const std::uint64_t val_seed = derive_seed(seed, 3);

  TrainResult out;
  BnnModel model = BnnModel::create(arch, c.prior_sigma, init_rng);
  const bool pinned = c.aleatoric_bottleneck > 0.0;
  if (pinned) pin_covariance_head(model, c.aleatoric_bottleneck);
  out.model = model;
  const std::size_t n = arch.output_dim;
  const std::size_t n_train = splits.train.size();

  std::vector<Matrix*> params;
  for (auto& l : model.layers)
    for (Matrix* m : {&l.weight_mean, &l.weight_rho, &l.bias_mean, &l.bias_rho}) params.push_back(m);
  AdamState adam(AdamSettings{c.learning_rate}, params);

  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < c.epochs && !out.diverged; ++epoch) {
    for (std::size_t i = n_train; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double kl_weight = c.kl_weight;
    if (c.kl_warmup_epochs > 0)
      kl_weight *= std::min(1.0, static_cast<double>(epoch + 1) / static_cast<double>(c.kl_warmup_epochs));
    const ObjectiveSettings objective{alpha, kl_weight, static_cast<double>(n_train)};

    for (std::size_t start = 0; start < n_train; start += c.batch_size) {
      const std::size_t count = std::min(c.batch_size, n_train - start);
      const Batch batch =
          alphacal::detail::take_rows(splits.train, std::span<const std::size_t>(order).subspan(start, count));
      Tape t;
      std::vector<Var> leaves;
      std::vector<LayerVars> layers;
      std::vector<KlBlock> kl;
      for (const auto& l : model.layers) {
        layers.push_back(bind_layer(t, l, Trainable::all, 0, &leaves));
        for (const auto& blk : kl_blocks(layers.back())) kl.push_back(blk);
      }
      std::vector<std::vector<FlipoutNoise>> noise;
      for (std::size_t k = 0; k < c.k_train; ++k) noise.push_back(draw_model_noise(model, count, rng));
      const ObjectiveVars o = build_objective(layers, model.negative_slope, n, kl, t.constant(batch.x),
                                              batch.y, noise, objective);
      LossRow row{++step, LossReport{o.total.value()[0], o.kl_term.value()[0], o.data_term.value()[0],
                                     alpha.value_or(0.0), c.k_train}};
      if (!std::isfinite(row.report.total)) {
        out.diverged = true;
        break;
      }
      t.backward(o.total);
      std::vector<Matrix> grads;
      grads.reserve(leaves.size());
      for (const Var& v : leaves) grads.push_back(t.grad(v));
      if (pinned)
        for (std::size_t g = grads.size() - 4; g < grads.size(); ++g) detail::zero_columns_from(grads[g], n);
      try {
        adam_step(adam, params, grads);
      } catch (const NonFiniteError&) {
        out.diverged = true;
        break;
      }
      out.losses.push_back(row);
    }
    if (out.diverged) break;

    Rng val_rng(val_seed);
    const double v = test_nll(mc_predict_batch(model, splits.val.x, c.k_val, val_rng), splits.val.y);
    if (!std::isfinite(v)) {
      out.diverged = true;
      break;
    }
    if (v < out.best_val_nll) {
      out.best_val_nll = v;
      out.best_epoch = epoch + 1;
      out.model = model;
    }
  }
  return out;
}

inline CsvTable loss_table(const std::vector<LossRow>& rows) {
  CsvTable t{{"step", "total", "kl", "data", "alpha"}, {}};
  for (const auto& r : rows)
    t.rows.push_back({std::to_string(r.step), format_double(r.report.total),
                      format_double(r.report.kl_term), format_double(r.report.data_term),
                      format_double(r.report.alpha)});
  return t;
}

struct Evaluation {
  CoverageCurve curve;
  double area = 0.0;
  double test_nll = 0.0;
  double r2 = 0.0;
  double epistemic_trace = 0.0;
  std::vector<McPredictionSet> mc;
};

/// Evaluates a (possibly calibrated) model on a split with `k` Monte Carlo
/// samples drawn from a stream seeded with `eval_seed`. Coverage uses the
/// moment-matched Gaussian of each mixture; NLL uses the mixture itself;
/// R² uses the mixture means.
inline Evaluation evaluate(const BnnModel& model, const Calibrator& cal, const Batch& split,
                           std::size_t k, std::uint64_t eval_seed, ThresholdMode mode) {
  Rng rng(eval_seed);
  Evaluation e;
  e.mc = calibrated_mc_predict(model, cal, split.x, k, rng);
  const auto gauss = predictive_gaussians(e.mc);
  const auto grid = default_coverage_grid();
  e.curve = coverage_curve(gauss, split.y, grid, mode);
  e.area = area_score(e.curve);
  e.test_nll = test_nll(e.mc, split.y);
  e.r2 = r_squared(means_matrix(gauss), split.y);
  e.epistemic_trace = mean_epistemic_trace(e.mc);
  return e;
}

}  // namespace alphacal::harness

#endif  // ALPHACAL_HARNESS_TRAIN_HPP
