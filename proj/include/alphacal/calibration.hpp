#ifndef ALPHACAL_CALIBRATION_HPP
#define ALPHACAL_CALIBRATION_HPP

// Post-hoc calibration: scalar and triangular temperature scaling, and
// last-layer fine-tuning under the black-box alpha objective.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "alphacal/bnn.hpp"
#include "alphacal/error.hpp"
#include "alphacal/gaussian_head.hpp"
#include "alphacal/losses.hpp"
#include "alphacal/metrics.hpp"
#include "alphacal/ndcore/adam.hpp"
#include "alphacal/ndcore/linalg.hpp"
#include "alphacal/ndcore/matrix.hpp"
#include "alphacal/ndcore/rng.hpp"
#include "alphacal/ndcore/tape.hpp"
#include "json.hpp"

namespace alphacal {

enum class Method { none, sts, trilts, ll, sll, trilll, llmu, sllmean, trilllmean };

inline constexpr std::array<Method, 8> kProposedMethods{
    Method::sts, Method::trilts, Method::ll,   Method::sll,
    Method::trilll, Method::llmu, Method::sllmean, Method::trilllmean};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::none: return "none";
    case Method::sts: return "sTS";
    case Method::trilts: return "TrilTS";
    case Method::ll: return "LL";
    case Method::sll: return "sLL";
    case Method::trilll: return "TrilLL";
    case Method::llmu: return "LLmu";
    case Method::sllmean: return "sLLmean";
    case Method::trilllmean: return "TrilLLmean";
  }
  return "none";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::none, Method::sts, Method::trilts, Method::ll, Method::sll,
                   Method::trilll, Method::llmu, Method::sllmean, Method::trilllmean})
    if (to_string(m) == s) return m;
  if (s == "LLμ" || s == "LLmean") return Method::llmu;
  throw DomainError("unknown calibration method '" + s + "'");
}

/// Methods that re-fit the final layer.
constexpr bool is_last_layer(Method m) noexcept {
  return m == Method::ll || m == Method::sll || m == Method::trilll || m == Method::llmu ||
         m == Method::sllmean || m == Method::trilllmean;
}
/// Methods that re-fit only the mean columns of the final layer.
constexpr bool is_mean_only(Method m) noexcept {
  return m == Method::llmu || m == Method::sllmean || m == Method::trilllmean;
}
constexpr bool uses_scalar(Method m) noexcept {
  return m == Method::sts || m == Method::sll || m == Method::sllmean;
}
constexpr bool uses_tril(Method m) noexcept {
  return m == Method::trilts || m == Method::trilll || m == Method::trilllmean;
}

/// A fitted calibration. Only the fields the method needs are set.
struct Calibrator {
  Method method = Method::none;
  double alpha = 0.0;
  std::optional<double> scale;              ///< s > 0: Σ → sΣ
  std::optional<Matrix> tril;               ///< N×N lower, diag > 0: Σ → LᵀΣL
  std::optional<VariationalLayer> last_layer;  ///< replacement final layer
  /// Set when the fit was degenerate, underdetermined, or did not converge.
  bool warning = false;
  std::string note;

  void validate() const {
    if (uses_scalar(method) != scale.has_value())
      throw DomainError("calibrator " + to_string(method) + ": scale presence mismatch");
    if (uses_tril(method) != tril.has_value())
      throw DomainError("calibrator " + to_string(method) + ": tril presence mismatch");
    if (is_last_layer(method) != last_layer.has_value())
      throw DomainError("calibrator " + to_string(method) + ": last layer presence mismatch");
    if (scale && !(*scale > 0.0)) throw DomainError("calibrator: scale must be > 0");
    if (tril) {
      for (std::size_t i = 0; i < tril->rows(); ++i)
        if (!((*tril)(i, i) > 0.0)) throw DomainError("calibrator: tril diagonal must be > 0");
    }
  }
};

/// Applies the temperature part of a calibrator. LL-family predictions must
/// come from calibrated_model(); the replaced layer is not applied here.
inline GaussianPrediction apply(const Calibrator& cal, const GaussianPrediction& pred) {
  if (cal.scale) {
    GaussianPrediction out = pred;
    const double r = std::sqrt(*cal.scale);
    out.chol *= r;
    return out;
  }
  if (cal.tril) {
    const Matrix& l = *cal.tril;
    if (l.rows() != pred.dim()) throw ShapeError("apply: transform dimension mismatch");
    // LᵀΣL = (LᵀC)(LᵀC)ᵀ
    const Matrix b = matmul_tn(l, pred.chol);
    Matrix cov = matmul_nt(b, b);
    for (std::size_t i = 0; i < cov.rows(); ++i)
      for (std::size_t j = 0; j < i; ++j) cov(j, i) = cov(i, j);
    GaussianPrediction out;
    out.mean = pred.mean;
    try {
      out.chol = cholesky(cov);
    } catch (const DecompositionError& e) {
      std::ostringstream os;
      os << "apply: re-factorization failed (" << e.what() << "); matrix:";
      for (std::size_t i = 0; i < cov.rows(); ++i) {
        os << "\n ";
        for (std::size_t j = 0; j < cov.cols(); ++j) os << ' ' << cov(i, j);
      }
      throw DecompositionError(e.pivot(), os.str());
    }
    return out;
  }
  return pred;
}

inline McPredictionSet apply(const Calibrator& cal, const McPredictionSet& mc) {
  McPredictionSet out;
  out.samples.reserve(mc.k());
  for (const auto& s : mc.samples) out.samples.push_back(apply(cal, s));
  return out;
}

/// The model with the calibrator's final layer swapped in (unchanged for
/// temperature-only methods).
inline BnnModel calibrated_model(const BnnModel& model, const Calibrator& cal) {
  BnnModel m = model;
  if (cal.last_layer) {
    if (cal.last_layer->in_dim() != m.layers.back().in_dim() ||
        cal.last_layer->out_dim() != m.layers.back().out_dim())
      throw ShapeError("calibrated_model: replacement layer shape mismatch");
    m.layers.back() = *cal.last_layer;
  }
  return m;
}

/// Calibrated Monte Carlo predictions for a batch of inputs.
inline std::vector<McPredictionSet> calibrated_mc_predict(const BnnModel& model,
                                                          const Calibrator& cal, const Matrix& x,
                                                          std::size_t k, Rng& rng) {
  auto sets = mc_predict_batch(calibrated_model(model, cal), x, k, rng);
  if (cal.scale || cal.tril)
    for (auto& s : sets) s = apply(cal, s);
  return sets;
}

/// Calibrated deterministic posterior-mean predictions.
inline std::vector<GaussianPrediction> calibrated_forward_mean(const BnnModel& model,
                                                               const Calibrator& cal,
                                                               const Matrix& x) {
  auto preds = forward_mean(calibrated_model(model, cal), x);
  if (cal.scale || cal.tril)
    for (auto& p : preds) p = apply(cal, p);
  return preds;
}

/// Closed-form scalar temperature: s* = Σ mahalanobis² / (D·N), the minimizer
/// of the mean NLL of 𝒩(μ, sΣ). Floored at 1e-12 with a warning.
inline Calibrator fit_sts(std::span<const GaussianPrediction> preds, const Matrix& targets) {
  detail::check_aligned(preds.size(), targets);
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) sum += mahalanobis_sq(preds[i], targets.row(i));
  Calibrator c;
  c.method = Method::sts;
  double s = sum / (static_cast<double>(preds.size()) * static_cast<double>(preds.front().dim()));
  if (!(s >= 1e-12)) {
    s = 1e-12;
    c.warning = true;
    c.note = "degenerate fit: residuals vanish, scale floored at 1e-12";
  }
  c.scale = s;
  return c;
}

struct TrilFitSettings {
  std::size_t max_iters = 2000;
  double learning_rate = 0.02;
  /// Stop when the mean NLL improves by less than this over `window` steps.
  double tolerance = 1e-10;
  std::size_t window = 25;
};

namespace detail {

inline Matrix tril_raw_identity(std::size_t n, double diag) {
  Matrix raw(1, tril_size(n));
  for (std::size_t i = 0; i < n; ++i)
    raw[tril_index(i, i)] = softplus_inverse(std::max(diag - kCholeskyFloor, 1e-12));
  return raw;
}

inline Matrix tril_from_raw(const Matrix& raw, std::size_t n) {
  Matrix l = unpack_tril(raw.data(), n);
  for (std::size_t i = 0; i < n; ++i) l(i, i) = softplus(l(i, i)) + kCholeskyFloor;
  return l;
}

inline Matrix stack_means(std::span<const GaussianPrediction> preds) { return means_matrix(preds); }

inline Matrix stack_chol(std::span<const GaussianPrediction> preds) {
  const std::size_t n = preds.front().dim();
  Matrix c(preds.size(), tril_size(n));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto packed = pack_tril(preds[i].chol);
    std::copy(packed.begin(), packed.end(), c.row(i).begin());
  }
  return c;
}

}  // namespace detail

/// Triangular temperature: L minimizing the mean NLL of 𝒩(μ, LᵀΣL), by Adam on
/// the packed triangle (diagonal through softplus), starting at √s*·I.
inline Calibrator fit_trilts(std::span<const GaussianPrediction> preds, const Matrix& targets,
                             const TrilFitSettings& settings = {}) {
  detail::check_aligned(preds.size(), targets);
  const std::size_t n = preds.front().dim();
  const double d = static_cast<double>(preds.size());
  const Calibrator sts = fit_sts(preds, targets);
  const Matrix means = detail::stack_means(preds);
  const Matrix chol = detail::stack_chol(preds);

  Matrix raw = detail::tril_raw_identity(n, std::sqrt(*sts.scale));
  AdamState adam(AdamSettings{settings.learning_rate}, std::array<Matrix*, 1>{&raw});
  Matrix best_raw = raw;
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> history;
  bool converged = false;
  for (std::size_t it = 0; it < settings.max_iters; ++it) {
    Tape t;
    Var p = t.parameter(raw);
    Var l = ad::tril_positive_diagonal(p, n, kCholeskyFloor);
    Var loss = ad::scale(
        ad::sum(ad::gaussian_nll(t.constant(means), t.constant(chol), targets, l)), 1.0 / d);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) break;
    if (value < best) {
      best = value;
      best_raw = raw;
    }
    history.push_back(value);
    if (history.size() > settings.window &&
        history[history.size() - 1 - settings.window] - value < settings.tolerance) {
      converged = true;
      break;
    }
    t.backward(loss);
    const std::array<Matrix, 1> grads{t.grad(p)};
    adam_step(adam, std::array<Matrix*, 1>{&raw}, grads);
  }
  Calibrator c;
  c.method = Method::trilts;
  c.tril = detail::tril_from_raw(best_raw, n);
  const bool underdetermined = d * static_cast<double>(n) < static_cast<double>(tril_size(n));
  c.warning = !converged || underdetermined;
  if (underdetermined)
    c.note = "underdetermined: fewer residual components than free parameters";
  else if (!converged)
    c.note = "did not converge within max_iters; best iterate returned";
  return c;
}

/// Which fine-tuning iterate is returned.
enum class FineTuneSelection {
  split_nll,  ///< lowest mixture NLL on the split
  objective,  ///< lowest value of the fitted objective on the whole split
};

struct FineTuneSettings {
  std::size_t steps = 500;
  double learning_rate = 1e-3;
  std::size_t k = 8;
  /// Early stop when the selection score has not improved for this many steps.
  std::size_t patience = 50;
  /// The selection score is evaluated every this many steps.
  std::size_t eval_every = 10;
  /// Minibatch size; 0 uses the whole split every step.
  std::size_t batch_size = 0;
  double kl_weight = 1.0;
  FineTuneSelection select = FineTuneSelection::objective;
};

namespace detail {

inline Batch take_rows(const Batch& b, std::span<const std::size_t> idx) {
  Batch out{Matrix(idx.size(), b.x.cols()), Matrix(idx.size(), b.y.cols())};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(b.x.row(idx[i]).begin(), b.x.row(idx[i]).end(), out.x.row(i).begin());
    std::copy(b.y.row(idx[i]).begin(), b.y.row(idx[i]).end(), out.y.row(i).begin());
  }
  return out;
}

// Writes a trained left column block back into a full matrix.
inline void write_columns(Matrix& dst, const Matrix& left) {
  for (std::size_t i = 0; i < dst.rows(); ++i)
    for (std::size_t j = 0; j < left.cols(); ++j) dst(i, j) = left(i, j);
}

inline Calibrator fit_last_layer_impl(const BnnModel& model, const Batch& split,
                                      std::optional<double> alpha, Method variant,
                                      const FineTuneSettings& settings, Rng& rng) {
  if (!is_last_layer(variant))
    throw DomainError("fit_last_layer: " + to_string(variant) + " is not a last-layer method");
  if (split.size() == 0) throw DomainError("fit_last_layer: empty calibration split");
  if (settings.k == 0) throw DomainError("fit_last_layer: k must be >= 1");
  const std::size_t n = model.output_dim;
  const bool mean_only = is_mean_only(variant);
  const Trainable mode = mean_only ? Trainable::mean_columns : Trainable::all;

  VariationalLayer current = model.layers.back();
  auto block = [&](const Matrix& m) { return mean_only ? split_columns(m, n).first : m; };
  // Layout: weight_mean, weight_rho, bias_mean, bias_rho, then temperature.
  std::vector<Matrix> params{block(current.weight_mean), block(current.weight_rho),
                             block(current.bias_mean), block(current.bias_rho)};
  const bool with_scale = uses_scalar(variant);
  const bool with_tril = uses_tril(variant);
  if (with_scale) params.push_back(Matrix(1, 1, 0.0));  // log s
  if (with_tril) params.push_back(tril_raw_identity(n, 1.0));

  auto sync_layer = [&] {
    if (mean_only) {
      write_columns(current.weight_mean, params[0]);
      write_columns(current.weight_rho, params[1]);
      write_columns(current.bias_mean, params[2]);
      write_columns(current.bias_rho, params[3]);
    } else {
      current.weight_mean = params[0];
      current.weight_rho = params[1];
      current.bias_mean = params[2];
      current.bias_rho = params[3];
    }
  };
  auto snapshot = [&] {
    Calibrator c;
    c.method = variant;
    c.alpha = alpha.value_or(0.0);
    c.last_layer = current;
    if (with_scale) c.scale = std::exp(params[4][0]);
    if (with_tril) c.tril = tril_from_raw(params.back(), n);
    return c;
  };

  const std::uint64_t eval_seed = rng.next_u64();
  // Both scores use the same Monte Carlo draws at every evaluation.
  auto split_score = [&](const Calibrator& c) {
    Rng eval_rng(eval_seed);
    const auto mcs = calibrated_mc_predict(model, c, split.x, settings.k, eval_rng);
    if (settings.select == FineTuneSelection::split_nll) return test_nll(mcs, split.y);
    double data = 0.0;
    std::vector<double> ll(settings.k);
    for (std::size_t i = 0; i < mcs.size(); ++i) {
      for (std::size_t k = 0; k < settings.k; ++k) ll[k] = -nll(mcs[i].samples[k], split.y.row(i));
      if (!alpha) {
        for (double v : ll) data -= v / static_cast<double>(settings.k);
      } else {
        for (double& v : ll) v *= *alpha;
        data -= logmeanexp(ll) / *alpha;
      }
    }
    return data + settings.kl_weight * gaussian_kl(*c.last_layer);
  };

  std::vector<Matrix*> param_ptrs;
  for (auto& m : params) param_ptrs.push_back(&m);
  AdamState adam(AdamSettings{settings.learning_rate}, param_ptrs);

  Calibrator best = snapshot();
  double best_score = split_score(best);
  std::size_t best_step = 0;
  bool aborted = false;

  std::vector<std::size_t> order(split.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  const std::size_t bs = (settings.batch_size == 0 || settings.batch_size >= split.size())
                             ? split.size()
                             : settings.batch_size;

  const ObjectiveSettings objective{alpha, settings.kl_weight,
                                    static_cast<double>(split.size())};
  for (std::size_t step = 1; step <= settings.steps; ++step) {
    Batch mb;
    const Batch* batch = &split;
    if (bs < split.size()) {
      if (cursor + bs > order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      mb = take_rows(split, std::span<const std::size_t>(order).subspan(cursor, bs));
      cursor += bs;
      batch = &mb;
    }
    Tape t;
    std::vector<LayerVars> layers;
    for (std::size_t i = 0; i + 1 < model.layers.size(); ++i)
      layers.push_back(bind_layer(t, model.layers[i], Trainable::none));
    std::vector<Var> leaves;
    layers.push_back(bind_layer(t, current, mode, n, &leaves));
    TemperatureVars temp;
    if (with_scale) {
      leaves.push_back(t.parameter(params[4]));
      temp.log_scale = leaves.back();
    }
    if (with_tril) {
      leaves.push_back(t.parameter(params.back()));
      temp.tril = ad::tril_positive_diagonal(leaves.back(), n, kCholeskyFloor);
    }
    const std::vector<KlBlock> kl{{leaves[0], leaves[1], current.prior_sigma},
                                  {leaves[2], leaves[3], current.prior_sigma}};
    std::vector<std::vector<FlipoutNoise>> noise;
    for (std::size_t k = 0; k < settings.k; ++k) {
      std::vector<FlipoutNoise> draw;
      for (std::size_t i = 0; i + 1 < model.layers.size(); ++i)
        draw.push_back(draw_flipout_noise(model.layers[i], batch->size(), rng));
      draw.push_back(draw_flipout_noise(current, batch->size(), rng));
      noise.push_back(std::move(draw));
    }
    const ObjectiveVars o = build_objective(layers, model.negative_slope, n, kl,
                                            t.constant(batch->x), batch->y, noise, objective, temp);
    if (!std::isfinite(o.total.value()[0])) {
      aborted = true;
      break;
    }
    t.backward(o.total);
    std::vector<Matrix> grads;
    for (const Var& v : leaves) grads.push_back(t.grad(v));
    try {
      adam_step(adam, param_ptrs, grads);
    } catch (const NonFiniteError&) {
      aborted = true;
      break;
    }
    sync_layer();

    if (step % settings.eval_every == 0 || step == settings.steps) {
      Calibrator c = snapshot();
      const double v = split_score(c);
      if (!std::isfinite(v)) {
        aborted = true;
        break;
      }
      if (v < best_score) {
        best_score = v;
        best = std::move(c);
        best_step = step;
      } else if (step - best_step >= settings.patience) {
        break;
      }
    }
  }
  if (aborted) {
    best.warning = true;
    best.note = "non-finite loss during fine-tuning; last good iterate returned";
  }
  return best;
}

}  // namespace detail

/// Re-fits the final layer (or only the columns feeding the N mean outputs)
/// on the calibration split under the BB-α objective, holding every other
/// layer fixed. Scalar and triangular variants co-optimize their temperature
/// jointly with the layer. The KL term covers only the re-fitted parameters
/// and the data term is scaled to the split size. The returned iterate is
/// chosen by `settings.select`.
inline Calibrator fit_last_layer(const BnnModel& model, const Batch& split, double alpha,
                                 Method variant, const FineTuneSettings& settings, Rng& rng) {
  if (alpha == 0.0)
    throw DomainError("fit_last_layer: alpha = 0 is the variational objective; use "
                      "fit_last_layer_vi");
  return detail::fit_last_layer_impl(model, split, alpha, variant, settings, rng);
}

/// Last-layer fine-tuning under the variational (KL) objective, the α → 0
/// member of the family.
inline Calibrator fit_last_layer_vi(const BnnModel& model, const Batch& split, Method variant,
                                    const FineTuneSettings& settings, Rng& rng) {
  return detail::fit_last_layer_impl(model, split, std::nullopt, variant, settings, rng);
}

// Calibrator document:
// {"format": "alphacal-calibrator", "version": 1, "method": "TrilLL", "alpha": 1.0,
//  "scale": s | null, "tril": [packed lower triangle] | null,
//  "last_layer": {layer checkpoint fragment} | null, "warning": bool, "note": str}

inline nlohmann::json calibrator_to_json(const Calibrator& c) {
  nlohmann::json j{{"format", "alphacal-calibrator"},
                   {"version", 1},
                   {"method", to_string(c.method)},
                   {"alpha", c.alpha},
                   {"scale", nullptr},
                   {"tril", nullptr},
                   {"last_layer", nullptr},
                   {"warning", c.warning},
                   {"note", c.note}};
  if (c.scale) j["scale"] = *c.scale;
  if (c.tril) j["tril"] = pack_tril(*c.tril);
  if (c.last_layer) j["last_layer"] = layer_to_json(*c.last_layer);
  return j;
}

inline Calibrator calibrator_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "alphacal-calibrator")
      throw ParseError(0, "calibrator: unexpected format tag");
    Calibrator c;
    c.method = method_from_string(j.at("method").get<std::string>());
    c.alpha = j.at("alpha").get<double>();
    if (!j.at("scale").is_null()) c.scale = j.at("scale").get<double>();
    if (!j.at("tril").is_null()) {
      const auto packed = j.at("tril").get<std::vector<double>>();
      c.tril = unpack_tril(packed, tril_dim(packed.size()));
    }
    if (!j.at("last_layer").is_null()) c.last_layer = layer_from_json(j.at("last_layer"));
    c.warning = j.value("warning", false);
    c.note = j.value("note", std::string());
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("calibrator: ") + e.what());
  } catch (const ShapeError& e) {
    throw ParseError(0, std::string("calibrator: ") + e.what());
  } catch (const DomainError& e) {
    throw ParseError(0, std::string("calibrator: ") + e.what());
  }
}

}  // namespace alphacal

#endif  // ALPHACAL_CALIBRATION_HPP
