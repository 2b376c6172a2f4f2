#ifndef ALPHACAL_BNN_HPP
#define ALPHACAL_BNN_HPP

// Mean-field Gaussian variational dense network with Flipout perturbations.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/gaussian_head.hpp"
#include "alphacal/ndcore/linalg.hpp"
#include "alphacal/ndcore/matrix.hpp"
#include "alphacal/ndcore/rng.hpp"
#include "alphacal/ndcore/tape.hpp"
#include "json.hpp"

namespace alphacal {

/// Initial posterior scale of every weight and bias.
inline constexpr double kInitialPosteriorSigma = 0.05;

struct VariationalLayer {
  Matrix weight_mean;  ///< in×out
  Matrix weight_rho;   ///< in×out, σ = softplus(ρ)
  Matrix bias_mean;    ///< 1×out
  Matrix bias_rho;     ///< 1×out
  double prior_sigma = 1.0;

  std::size_t in_dim() const noexcept { return weight_mean.rows(); }
  std::size_t out_dim() const noexcept { return weight_mean.cols(); }
  std::size_t parameter_count() const noexcept {
    return weight_mean.size() + bias_mean.size();
  }

  /// Means ~ U(±1/√in); ρ = softplus⁻¹(kInitialPosteriorSigma).
  static VariationalLayer create(std::size_t in, std::size_t out, double prior_sigma, Rng& rng) {
    if (in == 0 || out == 0) throw ShapeError("VariationalLayer: zero width");
    if (!(prior_sigma > 0.0)) throw DomainError("VariationalLayer: prior sigma must be > 0");
    VariationalLayer l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    const double rho0 = softplus_inverse(kInitialPosteriorSigma);
    l.weight_mean = Matrix(in, out);
    for (double& v : l.weight_mean.data()) v = rng.uniform(-bound, bound);
    l.weight_rho = Matrix(in, out, rho0);
    l.bias_mean = Matrix(1, out);
    l.bias_rho = Matrix(1, out, rho0);
    l.prior_sigma = prior_sigma;
    return l;
  }

  void validate() const {
    if (!weight_rho.same_shape(weight_mean) || bias_mean.rows() != 1 ||
        bias_mean.cols() != out_dim() || !bias_rho.same_shape(bias_mean))
      throw ShapeError("VariationalLayer: inconsistent parameter shapes");
    if (!(prior_sigma > 0.0)) throw DomainError("VariationalLayer: prior sigma must be > 0");
  }

  friend bool operator==(const VariationalLayer&, const VariationalLayer&) = default;
};

struct Architecture {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t output_dim = 3;
  double negative_slope = 0.3;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct BnnModel {
  std::vector<VariationalLayer> layers;
  std::size_t output_dim = 0;
  double negative_slope = 0.3;

  static BnnModel create(const Architecture& arch, double prior_sigma, Rng& rng) {
    BnnModel m;
    m.output_dim = arch.output_dim;
    m.negative_slope = arch.negative_slope;
    std::size_t in = arch.input_dim;
    for (std::size_t w : arch.hidden) {
      m.layers.push_back(VariationalLayer::create(in, w, prior_sigma, rng));
      in = w;
    }
    m.layers.push_back(
        VariationalLayer::create(in, raw_head_size(arch.output_dim), prior_sigma, rng));
    m.validate();
    return m;
  }

  Architecture architecture() const {
    Architecture a;
    a.input_dim = layers.front().in_dim();
    a.hidden.clear();
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) a.hidden.push_back(layers[i].out_dim());
    a.output_dim = output_dim;
    a.negative_slope = negative_slope;
    return a;
  }

  std::size_t input_dim() const { return layers.front().in_dim(); }

  void validate() const {
    if (layers.empty()) throw ShapeError("BnnModel: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].validate();
      if (i > 0 && layers[i].in_dim() != layers[i - 1].out_dim())
        throw ShapeError("BnnModel: layer " + std::to_string(i) + " does not chain");
    }
    if (layers.back().out_dim() != raw_head_size(output_dim))
      throw ShapeError("BnnModel: final width must be N + N(N+1)/2");
  }

  friend bool operator==(const BnnModel&, const BnnModel&) = default;
};

/// One draw of Flipout noise for a layer and batch: a shared base
/// perturbation ε_W, shared bias noise ε_b, and per-example ±1 signs.
struct FlipoutNoise {
  Matrix weight_eps;  ///< in×out
  Matrix bias_eps;    ///< 1×out
  Matrix sign_in;     ///< B×in
  Matrix sign_out;    ///< B×out
};

/// Draw order: ε_W row-major, ε_b, input signs, output signs.
inline FlipoutNoise draw_flipout_noise(std::size_t in, std::size_t out, std::size_t batch,
                                       Rng& rng) {
  FlipoutNoise n;
  n.weight_eps = Matrix(in, out);
  for (double& v : n.weight_eps.data()) v = rng.normal();
  n.bias_eps = Matrix(1, out);
  for (double& v : n.bias_eps.data()) v = rng.normal();
  n.sign_in = Matrix(batch, in);
  for (double& v : n.sign_in.data()) v = rng.sign();
  n.sign_out = Matrix(batch, out);
  for (double& v : n.sign_out.data()) v = rng.sign();
  return n;
}

inline FlipoutNoise draw_flipout_noise(const VariationalLayer& layer, std::size_t batch,
                                       Rng& rng) {
  return draw_flipout_noise(layer.in_dim(), layer.out_dim(), batch, rng);
}

inline std::vector<FlipoutNoise> draw_model_noise(const BnnModel& model, std::size_t batch,
                                                  Rng& rng) {
  std::vector<FlipoutNoise> out;
  out.reserve(model.layers.size());
  for (const auto& l : model.layers) out.push_back(draw_flipout_noise(l, batch, rng));
  return out;
}

/// Tape handles for one layer's variational parameters.
struct LayerVars {
  Var weight_mean;
  Var weight_rho;
  Var bias_mean;
  Var bias_rho;
  double prior_sigma = 1.0;
};

/// Which parameters of a layer are differentiable when bound to a tape.
enum class Trainable {
  none,
  all,
  /// Only the first `mean_columns` output columns (weights and biases).
  mean_columns,
};

namespace detail {

inline std::pair<Matrix, Matrix> split_columns(const Matrix& m, std::size_t k) {
  Matrix left(m.rows(), k), right(m.rows(), m.cols() - k);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j < k)
        left(i, j) = m(i, j);
      else
        right(i, j - k) = m(i, j);
    }
  return {std::move(left), std::move(right)};
}

inline Var bind_matrix(Tape& t, const Matrix& m, Trainable mode, std::size_t mean_columns,
                       std::vector<Var>* leaves) {
  switch (mode) {
    case Trainable::none:
      return t.constant(m);
    case Trainable::all: {
      Var p = t.parameter(m);
      if (leaves) leaves->push_back(p);
      return p;
    }
    case Trainable::mean_columns: {
      auto [left, right] = split_columns(m, mean_columns);
      Var p = t.parameter(std::move(left));
      if (leaves) leaves->push_back(p);
      return ad::hcat({p, t.constant(std::move(right))});
    }
  }
  return t.constant(m);
}

}  // namespace detail

/// Records a layer's parameters on `t`. Differentiable leaves are appended to
/// `leaves` in the order weight_mean, weight_rho, bias_mean, bias_rho; with
/// Trainable::mean_columns they are the first `mean_columns` columns only.
inline LayerVars bind_layer(Tape& t, const VariationalLayer& l, Trainable mode,
                            std::size_t mean_columns = 0, std::vector<Var>* leaves = nullptr) {
  LayerVars v;
  v.weight_mean = detail::bind_matrix(t, l.weight_mean, mode, mean_columns, leaves);
  v.weight_rho = detail::bind_matrix(t, l.weight_rho, mode, mean_columns, leaves);
  v.bias_mean = detail::bind_matrix(t, l.bias_mean, mode, mean_columns, leaves);
  v.bias_rho = detail::bind_matrix(t, l.bias_rho, mode, mean_columns, leaves);
  v.prior_sigma = l.prior_sigma;
  return v;
}

/// x·W̄ + ((x∘S)·(σ_W∘ε_W))∘R + b̄ + σ_b∘ε_b for a batch x (B×in).
inline Var forward_flipout(const LayerVars& l, Var x, const FlipoutNoise& noise) {
  Tape& t = *x.tape();
  if (x.cols() != l.weight_mean.rows())
    throw ShapeError("forward_flipout: input width " + std::to_string(x.cols()) +
                     " != layer in-dim " + std::to_string(l.weight_mean.rows()));
  if (noise.sign_in.rows() != x.rows())
    throw ShapeError("forward_flipout: noise drawn for a different batch size");
  Var mean_out = ad::matmul(x, l.weight_mean);
  Var delta_w = ad::mul(ad::softplus(l.weight_rho), t.constant(noise.weight_eps));
  Var perturb = ad::mul(ad::matmul(ad::mul(x, t.constant(noise.sign_in)), delta_w),
                        t.constant(noise.sign_out));
  Var bias = ad::add(l.bias_mean, ad::mul(ad::softplus(l.bias_rho), t.constant(noise.bias_eps)));
  return ad::add_row(ad::add(mean_out, perturb), bias);
}

/// x·W̄ + b̄, weights at their posterior means.
inline Var forward_deterministic(const LayerVars& l, Var x) {
  if (x.cols() != l.weight_mean.rows())
    throw ShapeError("forward: input width " + std::to_string(x.cols()) + " != layer in-dim " +
                     std::to_string(l.weight_mean.rows()));
  return ad::add_row(ad::matmul(x, l.weight_mean), l.bias_mean);
}

/// Full network pass producing the B×(N+T) raw head output. `noise` empty
/// means the deterministic posterior-mean pass.
inline Var forward_raw(const std::vector<LayerVars>& layers, double negative_slope, Var x,
                       std::span<const FlipoutNoise> noise) {
  if (!noise.empty() && noise.size() != layers.size())
    throw ShapeError("forward_raw: noise/layer count mismatch");
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = noise.empty() ? forward_deterministic(layers[i], h)
                      : forward_flipout(layers[i], h, noise[i]);
    if (i + 1 < layers.size()) h = ad::leaky_relu(h, negative_slope);
  }
  return h;
}

/// Mean and packed Cholesky nodes of a raw head output.
struct HeadVars {
  Var mean;  ///< B×N
  Var chol;  ///< B×T
};

inline HeadVars split_head(Var raw, std::size_t n) {
  if (raw.cols() != raw_head_size(n)) throw ShapeError("split_head: raw width mismatch");
  return HeadVars{ad::cols(raw, 0, n),
                  ad::tril_positive_diagonal(ad::cols(raw, n, tril_size(n)), n, kCholeskyFloor)};
}

inline std::vector<LayerVars> bind_model(Tape& t, const BnnModel& m) {
  std::vector<LayerVars> out;
  for (const auto& l : m.layers) out.push_back(bind_layer(t, l, Trainable::none));
  return out;
}

inline std::vector<GaussianPrediction> predictions_from_raw(const Matrix& raw, std::size_t n) {
  std::vector<GaussianPrediction> out;
  out.reserve(raw.rows());
  for (std::size_t i = 0; i < raw.rows(); ++i) out.push_back(from_raw(raw.row(i), n));
  return out;
}

/// Single-layer Flipout pass on plain matrices.
inline Matrix forward_flipout(const VariationalLayer& layer, const Matrix& x, Rng& rng) {
  if (x.cols() != layer.in_dim())
    throw ShapeError("forward_flipout: input width " + std::to_string(x.cols()) +
                     " != layer in-dim " + std::to_string(layer.in_dim()));
  const FlipoutNoise noise = draw_flipout_noise(layer, x.rows(), rng);
  Tape t;
  return forward_flipout(bind_layer(t, layer, Trainable::none), t.constant(x), noise).value();
}

inline Matrix forward_raw(const BnnModel& model, const Matrix& x,
                          std::span<const FlipoutNoise> noise) {
  Tape t;
  return forward_raw(bind_model(t, model), model.negative_slope, t.constant(x), noise).value();
}

/// Deterministic pass at the posterior means.
inline std::vector<GaussianPrediction> forward_mean(const BnnModel& model, const Matrix& x) {
  return predictions_from_raw(forward_raw(model, x, {}), model.output_dim);
}

/// K per-sample predictions for one input.
struct McPredictionSet {
  std::vector<GaussianPrediction> samples;
  std::size_t k() const noexcept { return samples.size(); }
  std::size_t dim() const { return samples.front().dim(); }
};

/// `k` Flipout passes over the whole batch; result[i] holds input i's set.
inline std::vector<McPredictionSet> mc_predict_batch(const BnnModel& model, const Matrix& x,
                                                     std::size_t k, Rng& rng) {
  if (k == 0) throw DomainError("mc_predict: k must be >= 1");
  std::vector<McPredictionSet> out(x.rows());
  for (auto& s : out) s.samples.reserve(k);
  for (std::size_t s = 0; s < k; ++s) {
    const auto noise = draw_model_noise(model, x.rows(), rng);
    const Matrix raw = forward_raw(model, x, noise);
    for (std::size_t i = 0; i < x.rows(); ++i)
      out[i].samples.push_back(from_raw(raw.row(i), model.output_dim));
  }
  return out;
}

inline McPredictionSet mc_predict(const BnnModel& model, std::span<const double> input,
                                  std::size_t k, Rng& rng) {
  return mc_predict_batch(model, Matrix::row_vector(input), k, rng).front();
}

// Checkpoint document:
// {
//   "format": "alphacal-bnn", "version": 1,
//   "architecture": {"input_dim", "hidden": [...], "output_dim", "activation": "leaky_relu",
//                    "negative_slope"},
//   "layers": [{"in", "out", "prior_sigma", "weight_mean": [row-major], "weight_rho",
//               "bias_mean", "bias_rho"}, ...]
// }
// Doubles are written in shortest round-trip form, so load(save(m)) == m.

inline nlohmann::json layer_to_json(const VariationalLayer& l) {
  return {{"in", l.in_dim()},
          {"out", l.out_dim()},
          {"prior_sigma", l.prior_sigma},
          {"weight_mean", l.weight_mean.data()},
          {"weight_rho", l.weight_rho.data()},
          {"bias_mean", l.bias_mean.data()},
          {"bias_rho", l.bias_rho.data()}};
}

inline VariationalLayer layer_from_json(const nlohmann::json& j) {
  try {
    const std::size_t in = j.at("in").get<std::size_t>();
    const std::size_t out = j.at("out").get<std::size_t>();
    VariationalLayer l;
    l.prior_sigma = j.at("prior_sigma").get<double>();
    l.weight_mean = Matrix(in, out, j.at("weight_mean").get<std::vector<double>>());
    l.weight_rho = Matrix(in, out, j.at("weight_rho").get<std::vector<double>>());
    l.bias_mean = Matrix(1, out, j.at("bias_mean").get<std::vector<double>>());
    l.bias_rho = Matrix(1, out, j.at("bias_rho").get<std::vector<double>>());
    l.validate();
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("layer: ") + e.what());
  } catch (const ShapeError& e) {
    throw ParseError(0, std::string("layer: ") + e.what());
  }
}

inline nlohmann::json model_to_json(const BnnModel& m) {
  const Architecture a = m.architecture();
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) layers.push_back(layer_to_json(l));
  return {{"format", "alphacal-bnn"},
          {"version", 1},
          {"architecture",
           {{"input_dim", a.input_dim},
            {"hidden", a.hidden},
            {"output_dim", a.output_dim},
            {"activation", "leaky_relu"},
            {"negative_slope", a.negative_slope}}},
          {"layers", std::move(layers)}};
}

inline BnnModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "alphacal-bnn")
      throw ParseError(0, "checkpoint: unexpected format tag");
    if (j.at("version").get<int>() != 1) throw ParseError(0, "checkpoint: unsupported version");
    const auto& a = j.at("architecture");
    BnnModel m;
    m.output_dim = a.at("output_dim").get<std::size_t>();
    m.negative_slope = a.at("negative_slope").get<double>();
    for (const auto& l : j.at("layers")) m.layers.push_back(layer_from_json(l));
    m.validate();
    if (m.architecture().hidden != a.at("hidden").get<std::vector<std::size_t>>() ||
        m.input_dim() != a.at("input_dim").get<std::size_t>())
      throw ParseError(0, "checkpoint: architecture descriptor disagrees with layers");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw ParseError(0, std::string("checkpoint: ") + e.what());
  }
}

}  // namespace alphacal

#endif  // ALPHACAL_BNN_HPP
