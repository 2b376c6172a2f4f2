#ifndef ALPHACAL_NDCORE_ADAM_HPP
#define ALPHACAL_NDCORE_ADAM_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/ndcore/matrix.hpp"

namespace alphacal {

struct AdamSettings {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators for a fixed list of parameter matrices.
struct AdamState {
  AdamSettings settings;
  std::size_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;

  AdamState() = default;
  AdamState(AdamSettings s, std::span<Matrix* const> params) : settings(s) {
    for (const Matrix* p : params) {
      first_moment.emplace_back(p->rows(), p->cols());
      second_moment.emplace_back(p->rows(), p->cols());
    }
  }
};

/// One bias-corrected Adam update. Parameters are left untouched when any
/// gradient entry is non-finite.
inline void adam_step(AdamState& state, std::span<Matrix* const> params,
                      std::span<const Matrix> grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i]) || !params[i]->same_shape(state.first_moment[i]))
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    if (!grads[i].all_finite())
      throw NonFiniteError("adam_step: non-finite gradient for parameter " + std::to_string(i));
  }
  const AdamSettings& s = state.settings;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    const Matrix& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon);
    }
  }
}

}  // namespace alphacal

#endif  // ALPHACAL_NDCORE_ADAM_HPP
