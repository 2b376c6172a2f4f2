#ifndef ALPHACAL_LOSSES_HPP
#define ALPHACAL_LOSSES_HPP

// Training objectives: the variational (KL) objective, the black-box alpha
// objective, and closed-form Gaussian divergences.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alphacal/bnn.hpp"
#include "alphacal/error.hpp"
#include "alphacal/gaussian_head.hpp"
#include "alphacal/ndcore/matrix.hpp"
#include "alphacal/ndcore/rng.hpp"
#include "alphacal/ndcore/tape.hpp"

namespace alphacal {

struct LossReport {
  double total = 0.0;
  double kl_term = 0.0;
  double data_term = 0.0;
  double alpha = 0.0;  ///< 0 for the plain variational objective
  std::size_t k_samples = 0;
};

/// Features and targets, one example per row.
struct Batch {
  Matrix x;
  Matrix y;
  std::size_t size() const noexcept { return x.rows(); }
};

/// KL(𝒩(μ, σ_q²) || 𝒩(0, σ_p²)) for one weight.
inline double gaussian_kl_scalar(double mu_q, double sigma_q, double sigma_p) {
  return std::log(sigma_p / sigma_q) + (sigma_q * sigma_q + mu_q * mu_q) / (2.0 * sigma_p * sigma_p) -
         0.5;
}

inline double gaussian_kl(const VariationalLayer& l) {
  double s = 0.0;
  for (std::size_t k = 0; k < l.weight_mean.size(); ++k)
    s += gaussian_kl_scalar(l.weight_mean[k], softplus(l.weight_rho[k]), l.prior_sigma);
  for (std::size_t k = 0; k < l.bias_mean.size(); ++k)
    s += gaussian_kl_scalar(l.bias_mean[k], softplus(l.bias_rho[k]), l.prior_sigma);
  return s;
}

/// KL(q || p) summed over every weight and bias of the model.
inline double gaussian_kl(const BnnModel& m) {
  double s = 0.0;
  for (const auto& l : m.layers) s += gaussian_kl(l);
  return s;
}

/// A block of variational parameters contributing to the KL term.
struct KlBlock {
  Var mean;
  Var rho;
  double prior_sigma = 1.0;
};

inline std::vector<KlBlock> kl_blocks(const LayerVars& l) {
  return {{l.weight_mean, l.weight_rho, l.prior_sigma}, {l.bias_mean, l.bias_rho, l.prior_sigma}};
}

/// Optional temperature applied to every per-sample prediction before the
/// likelihood: a scalar log-variance-scale (Σ → e^{log_s}Σ) and/or a packed
/// 1×T triangle L with positive diagonal (Σ → LᵀΣL).
struct TemperatureVars {
  std::optional<Var> log_scale;
  std::optional<Var> tril;
};

/// Settings shared by the variational and alpha objectives.
struct ObjectiveSettings {
  /// nullopt selects the variational objective; otherwise the BB-α estimator.
  std::optional<double> alpha;
  double kl_weight = 1.0;
  /// Size of the dataset the batch stands for; the batch data term is scaled
  /// by dataset_size / batch_size. Zero means "the batch is the dataset".
  double dataset_size = 0.0;
};

struct ObjectiveVars {
  Var total;
  Var kl_term;
  Var data_term;
};

/// Per-example, per-sample log-likelihoods (B×K) under the Flipout draws in
/// `noise` (one vector of per-layer noise per sample).
inline Var sample_log_likelihoods(const std::vector<LayerVars>& layers, double negative_slope,
                                  std::size_t n, Var x, const Matrix& y,
                                  std::span<const std::vector<FlipoutNoise>> noise,
                                  const TemperatureVars& temp = {}) {
  if (noise.empty()) throw DomainError("sample_log_likelihoods: need at least one sample");
  std::vector<Var> columns;
  columns.reserve(noise.size());
  for (const auto& draw : noise) {
    Var raw = forward_raw(layers, negative_slope, x, draw);
    HeadVars head = split_head(raw, n);
    Var chol = head.chol;
    if (temp.log_scale) chol = ad::mul_scalar(chol, ad::exp(ad::scale(*temp.log_scale, 0.5)));
    columns.push_back(ad::scale(ad::gaussian_nll(head.mean, chol, y, temp.tril), -1.0));
  }
  return columns.size() == 1 ? columns.front() : ad::hcat(columns);
}

/// Records the objective on the tape of `x`.
///
/// Variational: data = −(D/B)·(1/K)·Σ_k Σ_b ll_bk.
/// BB-α:        data = −(D/B)·(1/α)·Σ_b ln[(1/K) Σ_k exp(α·ll_bk)].
/// In both cases kl = kl_weight · Σ KL over `kl`.
inline ObjectiveVars build_objective(const std::vector<LayerVars>& layers, double negative_slope,
                                     std::size_t n, const std::vector<KlBlock>& kl, Var x,
                                     const Matrix& y,
                                     std::span<const std::vector<FlipoutNoise>> noise,
                                     const ObjectiveSettings& settings,
                                     const TemperatureVars& temp = {}) {
  Tape& t = *x.tape();
  if (settings.alpha && *settings.alpha == 0.0)
    throw DomainError("bb_alpha_loss: alpha = 0 is the variational objective; use vi_loss");
  const double b = static_cast<double>(x.rows());
  const double d = settings.dataset_size > 0.0 ? settings.dataset_size : b;
  const double k = static_cast<double>(noise.size());

  Var ll = sample_log_likelihoods(layers, negative_slope, n, x, y, noise, temp);
  Var data;
  if (!settings.alpha) {
    data = ad::scale(ad::sum(ll), -(d / b) / k);
  } else {
    const double alpha = *settings.alpha;
    Var lse = ad::logsumexp_rows(ad::scale(ll, alpha));
    Var per_point = ad::add_scalar(lse, -std::log(k));
    data = ad::scale(ad::sum(per_point), -(d / b) / alpha);
  }

  Var kl_sum = t.constant(Matrix(1, 1, 0.0));
  for (const auto& blk : kl) kl_sum = ad::add(kl_sum, ad::gaussian_kl(blk.mean, blk.rho, blk.prior_sigma));
  Var kl_term = ad::scale(kl_sum, settings.kl_weight);
  return ObjectiveVars{ad::add(kl_term, data), kl_term, data};
}

namespace detail {

inline std::vector<std::vector<FlipoutNoise>> draw_samples(const BnnModel& model,
                                                           std::size_t batch, std::size_t k,
                                                           Rng& rng) {
  if (k == 0) throw DomainError("loss: k must be >= 1");
  std::vector<std::vector<FlipoutNoise>> out;
  out.reserve(k);
  for (std::size_t s = 0; s < k; ++s) out.push_back(draw_model_noise(model, batch, rng));
  return out;
}

inline LossReport evaluate_objective(const BnnModel& model, const Batch& batch,
                                     std::span<const std::vector<FlipoutNoise>> noise,
                                     const ObjectiveSettings& settings) {
  Tape t;
  std::vector<LayerVars> layers;
  std::vector<KlBlock> kl;
  for (const auto& l : model.layers) {
    layers.push_back(bind_layer(t, l, Trainable::none));
    for (const auto& blk : kl_blocks(layers.back())) kl.push_back(blk);
  }
  const ObjectiveVars o = build_objective(layers, model.negative_slope, model.output_dim, kl,
                                          t.constant(batch.x), batch.y, noise, settings);
  LossReport r;
  r.kl_term = o.kl_term.value()[0];
  r.data_term = o.data_term.value()[0];
  r.total = r.kl_term + r.data_term;
  r.alpha = settings.alpha.value_or(0.0);
  r.k_samples = noise.size();
  if (!std::isfinite(r.total)) throw NonFiniteError("loss is not finite");
  return r;
}

}  // namespace detail

/// Variational objective on a batch with `k` Flipout samples.
inline LossReport vi_loss(const BnnModel& model, const Batch& batch, std::size_t k, Rng& rng,
                          double kl_weight, double dataset_size = 0.0) {
  const auto noise = detail::draw_samples(model, batch.size(), k, rng);
  return detail::evaluate_objective(model, batch, noise,
                                    ObjectiveSettings{std::nullopt, kl_weight, dataset_size});
}

/// Black-box α objective on a batch with `k` Flipout samples.
inline LossReport bb_alpha_loss(const BnnModel& model, const Batch& batch, double alpha,
                                std::size_t k, Rng& rng, double kl_weight,
                                double dataset_size = 0.0) {
  if (alpha == 0.0)
    throw DomainError("bb_alpha_loss: alpha = 0 is the variational objective; use vi_loss");
  const auto noise = detail::draw_samples(model, batch.size(), k, rng);
  return detail::evaluate_objective(model, batch, noise,
                                    ObjectiveSettings{alpha, kl_weight, dataset_size});
}

/// Univariate Gaussian, for divergence diagnostics.
struct Gaussian1d {
  double mean = 0.0;
  double sigma = 1.0;
};

/// α-divergence D_α[p||q] = (1 − ∫p^α q^{1−α}) / (α(1−α)) in closed form.
inline double alpha_divergence_1d(const Gaussian1d& p, const Gaussian1d& q, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw DomainError("alpha_divergence_1d: alpha must lie strictly inside (0, 1)");
  if (!(p.sigma > 0.0) || !(q.sigma > 0.0)) throw DomainError("alpha_divergence_1d: sigma <= 0");
  const double vp = p.sigma * p.sigma;
  const double vq = q.sigma * q.sigma;
  const double precision = alpha / vp + (1.0 - alpha) / vq;
  const double dm = p.mean - q.mean;
  const double log_integral = -0.5 * alpha * std::log(2.0 * std::numbers::pi * vp) -
                              0.5 * (1.0 - alpha) * std::log(2.0 * std::numbers::pi * vq) +
                              0.5 * std::log(2.0 * std::numbers::pi / precision) -
                              0.5 * alpha * (1.0 - alpha) * dm * dm / (alpha * vq + (1.0 - alpha) * vp);
  return (1.0 - std::exp(log_integral)) / (alpha * (1.0 - alpha));
}

/// ln((1/K) Σ exp(v_k)), shifted by the maximum.
inline double logmeanexp(std::span<const double> v) {
  if (v.empty()) throw DomainError("logmeanexp of an empty set");
  double m = v[0];
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

}  // namespace alphacal

#endif  // ALPHACAL_LOSSES_HPP
