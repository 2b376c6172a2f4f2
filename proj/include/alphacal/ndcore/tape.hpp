#ifndef ALPHACAL_NDCORE_TAPE_HPP
#define ALPHACAL_NDCORE_TAPE_HPP

// Reverse-mode differentiation over matrix-valued primitives.
//
// A Tape owns every intermediate value of one recorded computation. Nodes are
// appended in evaluation order, so replaying the backward closures in reverse
// insertion order is a valid topological sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/ndcore/linalg.hpp"
#include "alphacal/ndcore/matrix.hpp"

namespace alphacal {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the upstream gradient and this node's own value.
  using Backward = std::function<void(Tape&, const Matrix& upstream, const Matrix& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked.
  Var parameter(Matrix value) { return push(std::move(value), true, nullptr); }
  /// Leaf treated as fixed data.
  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  /// Appends a node computed from recorded inputs. The closure receives the
  /// upstream gradient of this node and must call accumulate() on inputs.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward back) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(back));
  }
  Var record(Matrix value, std::span<const Var> inputs, Backward back) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owned(v);
      needs = needs || nodes_[v.id()].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(back) : nullptr);
  }

  const Matrix& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }
  bool needs_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].needs_grad;
  }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    n.grad += g;
  }

  /// Seeds d(out)/d(out) = 1 and sweeps every recorded closure in reverse.
  void backward(Var out) {
    check_owned(out);
    const Matrix& ov = nodes_[out.id()].value;
    if (ov.size() != 1) throw ShapeError("backward: output must be 1x1, got " + ov.shape_string());
    for (Node& n : nodes_) n.grad = Matrix();
    accumulate(out, Matrix(1, 1, 1.0));
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.back || n.grad.empty()) continue;
      const Matrix upstream = n.grad;
      n.back(*this, upstream, n.value);
    }
  }

  /// Gradient of the last backward() output with respect to `v`. Nodes that
  /// did not influence the output get a zero matrix.
  Matrix grad(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size())
      throw MissingNodeError("grad: node was not recorded on this tape");
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward back;
  };

  Var push(Matrix value, bool needs, Backward back) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs, std::move(back)});
    return Var(this, nodes_.size() - 1);
  }
  void check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size())
      throw MissingNodeError("node does not belong to this tape");
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const {
  if (!tape_) throw MissingNodeError("unbound Var");
  return tape_->value(*this);
}

namespace ad {

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  Matrix out = alphacal::matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.accumulate(a, matmul_nt(g, b.value()));
    if (t.needs_grad(b)) t.accumulate(b, matmul_tn(a.value(), g));
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().transpose(), {a},
                  [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g.transpose()); });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g * -1.0);
  });
}

/// Adds a 1×n row to every row of a.
inline Var add_row(Var a, Var row) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  detail::require(rv.rows() == 1 && rv.cols() == av.cols(),
                  "add_row: " + av.shape_string() + " + " + rv.shape_string());
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) {
      Matrix r(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) r[j] += g(i, j);
      t.accumulate(row, r);
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = *a.tape();
  return t.record(hadamard(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.accumulate(a, hadamard(g, b.value()));
    if (t.needs_grad(b)) t.accumulate(b, hadamard(g, a.value()));
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape();
  return t.record(a.value() * c, {a},
                  [a, c](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g * c); });
}

/// Multiplies every entry of a by the 1×1 node s.
inline Var mul_scalar(Var a, Var s) {
  Tape& t = *a.tape();
  detail::require(s.value().size() == 1, "mul_scalar: scalar must be 1x1");
  const double sv = s.value()[0];
  return t.record(a.value() * sv, {a, s}, [a, s, sv](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.accumulate(a, g * sv);
    if (t.needs_grad(s)) {
      double acc = 0.0;
      const Matrix& av = a.value();
      for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * av[k];
      t.accumulate(s, Matrix(1, 1, acc));
    }
  });
}

inline Var add_scalar(Var a, double c) {
  Tape& t = *a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) v += c;
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}

/// max(x, 0) + slope·min(x, 0)
inline Var leaky_relu(Var a, double slope) {
  Tape& t = *a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : slope * v;
  return t.record(std::move(out), {a}, [a, slope](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = g;
    const Matrix& av = a.value();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (!(av[k] > 0.0)) d[k] *= slope;
    t.accumulate(a, d);
  });
}

inline Var softplus(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) v = alphacal::softplus(v);
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = g;
    const Matrix& av = a.value();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] *= sigmoid(av[k]);
    t.accumulate(a, d);
  });
}

inline Var exp(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& out) {
    t.accumulate(a, hadamard(g, out));
  });
}

inline Var log(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) v = std::log(v);
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = g;
    const Matrix& av = a.value();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] /= av[k];
    t.accumulate(a, d);
  });
}

inline Var square(Var a) { return mul(a, a); }

/// Sum of all entries, as a 1×1 node.
inline Var sum(Var a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Matrix(1, 1, s), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, Matrix(a.rows(), a.cols(), g[0]));
  });
}

/// Columns [start, start+count) of a.
inline Var cols(Var a, std::size_t start, std::size_t count) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  detail::require(start + count <= av.cols(), "cols: range exceeds " + av.shape_string());
  Matrix out(av.rows(), count);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, start + j);
  return t.record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d(a.rows(), a.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) d(i, start + j) = g(i, j);
    t.accumulate(a, d);
  });
}

/// Horizontal concatenation of nodes with equal row counts.
inline Var hcat(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "hcat: no inputs");
  Tape& t = *parts.front().tape();
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require(p.rows() == rows, "hcat: row mismatch");
    total += p.cols();
  }
  Matrix out(rows, total);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  return t.record(std::move(out), std::span<const Var>(parts),
                  [parts](Tape& t, const Matrix& g, const Matrix&) {
                    std::size_t off = 0;
                    for (const Var& p : parts) {
                      Matrix d(p.rows(), p.cols());
                      for (std::size_t i = 0; i < d.rows(); ++i)
                        for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) = g(i, off + j);
                      t.accumulate(p, d);
                      off += p.cols();
                    }
                  });
}

/// Row-wise log Σ_j exp(a_ij), stabilized by the row maximum. Output B×1.
inline Var logsumexp_rows(Var a) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  Matrix soft(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const auto r = av.row(i);
    const double m = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      soft(i, j) = std::exp(r[j] - m);
      s += soft(i, j);
    }
    for (std::size_t j = 0; j < r.size(); ++j) soft(i, j) /= s;
    out(i, 0) = m + std::log(s);
  }
  return t.record(std::move(out), {a}, [a, soft = std::move(soft)](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = soft;
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) *= g(i, 0);
    t.accumulate(a, d);
  });
}

/// Cholesky factor of a symmetric positive-definite node. Only the lower
/// triangle of the input is read, so the gradient is lower-triangular.
inline Var cholesky(Var a) {
  Tape& t = *a.tape();
  Matrix sym = a.value();
  detail::require(sym.rows() == sym.cols(), "cholesky: non-square " + sym.shape_string());
  for (std::size_t i = 0; i < sym.rows(); ++i)
    for (std::size_t j = 0; j < i; ++j) sym(j, i) = sym(i, j);
  return t.record(alphacal::cholesky(sym), {a},
                  [a](Tape& t, const Matrix& lbar_in, const Matrix& l) {
    const std::size_t n = l.rows();
    Matrix lbar(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) lbar(i, j) = lbar_in(i, j);
    // P = Φ(Lᵀ L̄): lower triangle with halved diagonal.
    Matrix p = matmul_tn(l, lbar);
    for (std::size_t i = 0; i < n; ++i) {
      p(i, i) *= 0.5;
      for (std::size_t j = i + 1; j < n; ++j) p(i, j) = 0.0;
    }
    // S = L⁻ᵀ P L⁻¹, via column-wise and row-wise triangular solves.
    Matrix tmp(n, n);
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = p(i, j);
      const auto x = solve_lower_transposed(l, col);
      for (std::size_t i = 0; i < n; ++i) tmp(i, j) = x[i];
    }
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      // row_i(S) = row_i(tmp)·L⁻¹  ⇔  L⁻ᵀ·row_i(tmp)ᵀ
      const auto x = solve_lower_transposed(l, tmp.row(i));
      for (std::size_t j = 0; j < n; ++j) s(i, j) = x[j];
    }
    Matrix abar(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      abar(i, i) = s(i, i);
      for (std::size_t j = 0; j < i; ++j) abar(i, j) = s(i, j) + s(j, i);
    }
    t.accumulate(a, abar);
  });
}

/// ln det(L·Lᵀ) = 2 Σ ln L_ii for a lower-triangular node.
inline Var logdet_from_cholesky(Var l) {
  Tape& t = *l.tape();
  return t.record(Matrix(1, 1, log_det_from_cholesky(l.value())), {l},
                  [l](Tape& t, const Matrix& g, const Matrix&) {
                    const Matrix& lv = l.value();
                    Matrix d(lv.rows(), lv.cols());
                    for (std::size_t i = 0; i < lv.rows(); ++i) d(i, i) = 2.0 * g[0] / lv(i, i);
                    t.accumulate(l, d);
                  });
}

/// Applies softplus + floor to the diagonal slots of row-major packed lower
/// triangles (one triangle per row); off-diagonal slots pass through.
inline Var tril_positive_diagonal(Var packed, std::size_t n, double floor) {
  Tape& t = *packed.tape();
  const Matrix& pv = packed.value();
  detail::require(pv.cols() == tril_size(n), "tril_positive_diagonal: width " +
                                                 std::to_string(pv.cols()) + " for n=" +
                                                 std::to_string(n));
  Matrix out = pv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t i = 0; i < n; ++i) {
      double& v = out(r, tril_index(i, i));
      v = alphacal::softplus(v) + floor;
    }
  return t.record(std::move(out), {packed}, [packed, n](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = g;
    const Matrix& pv = packed.value();
    for (std::size_t r = 0; r < d.rows(); ++r)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = tril_index(i, i);
        d(r, k) *= sigmoid(pv(r, k));
      }
    t.accumulate(packed, d);
  });
}

/// Per-row Gaussian negative log density of `target` under 𝒩(μ, LᵀΣL) with
/// Σ = C·Cᵀ. `mean` is B×N, `chol` is B×T packed lower triangles with positive
/// diagonal, `target` is B×N. `transform`, when given, is a 1×T packed lower
/// triangle L shared by all rows; otherwise L = I. Output is B×1 and includes
/// the (N/2)·ln 2π constant.
inline Var gaussian_nll(Var mean, Var chol, const Matrix& target,
                        std::optional<Var> transform = std::nullopt) {
  Tape& t = *mean.tape();
  const Matrix& mv = mean.value();
  const Matrix& cv = chol.value();
  const std::size_t b = mv.rows();
  const std::size_t n = mv.cols();
  const std::size_t tri = tril_size(n);
  detail::require(cv.rows() == b && cv.cols() == tri, "gaussian_nll: chol shape " +
                                                          cv.shape_string());
  detail::require(target.rows() == b && target.cols() == n,
                  "gaussian_nll: target shape " + target.shape_string());
  std::optional<Matrix> lmat;
  double l_logdet = 0.0;
  if (transform) {
    detail::require(transform->value().size() == tri, "gaussian_nll: transform size");
    lmat = unpack_tril(transform->value().data(), n);
    l_logdet = log_det_from_cholesky(*lmat);
  }
  const double constant = 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);

  // Saved per row: u = (LᵀC)⁻¹ r and a = (LᵀCCᵀL)⁻¹ r.
  Matrix us(b, n), as(b, n);
  Matrix out(b, 1);
  std::vector<double> r(n);
  for (std::size_t row = 0; row < b; ++row) {
    const Matrix c = unpack_tril(cv.row(row), n);
    for (std::size_t i = 0; i < n; ++i) r[i] = target(row, i) - mv(row, i);
    const std::vector<double> v = lmat ? solve_lower_transposed(*lmat, r) : r;
    const auto u = solve_lower(c, v);
    auto w = solve_lower_transposed(c, u);
    if (lmat) w = solve_lower(*lmat, w);
    double maha = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      maha += u[i] * u[i];
      us(row, i) = u[i];
      as(row, i) = w[i];
    }
    out(row, 0) = 0.5 * (log_det_from_cholesky(c) + l_logdet) + 0.5 * maha + constant;
  }

  std::vector<Var> inputs{mean, chol};
  if (transform) inputs.push_back(*transform);
  auto back = [mean, chol, transform, n, tri, us = std::move(us), as = std::move(as),
               lmat](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& cv = chol.value();
    const std::size_t b = g.rows();
    Matrix dmean(b, n), dchol(b, tri), dl(1, tri);
    for (std::size_t row = 0; row < b; ++row) {
      const double gr = g(row, 0);
      if (gr == 0.0) continue;
      const auto u = us.row(row);
      const auto a = as.row(row);
      for (std::size_t i = 0; i < n; ++i) dmean(row, i) = -gr * a[i];
      // La = L·a (L = I when absent).
      std::vector<double> la(a.begin(), a.end());
      if (lmat) {
        for (std::size_t i = 0; i < n; ++i) {
          double s = 0.0;
          for (std::size_t k = 0; k <= i; ++k) s += (*lmat)(i, k) * a[k];
          la[i] = s;
        }
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
          double d = -la[i] * u[j];
          if (i == j) d += 1.0 / cv(row, tril_index(i, i));
          dchol(row, tril_index(i, j)) = gr * d;
        }
      if (lmat) {
        // ∂/∂L = −C·u·aᵀ (lower part) + diag(1/L_ii)
        std::vector<double> cu(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k <= i; ++k) cu[i] += cv(row, tril_index(i, k)) * u[k];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j <= i; ++j) {
            double d = -cu[i] * a[j];
            if (i == j) d += 1.0 / (*lmat)(i, i);
            dl[tril_index(i, j)] += gr * d;
          }
      }
    }
    if (t.needs_grad(mean)) t.accumulate(mean, dmean);
    if (t.needs_grad(chol)) t.accumulate(chol, dchol);
    if (transform && t.needs_grad(*transform)) t.accumulate(*transform, dl);
  };
  return t.record(std::move(out), std::span<const Var>(inputs), std::move(back));
}

/// Σ over entries of KL(𝒩(μ, softplus(ρ)²) || 𝒩(0, prior_sigma²)). Output 1×1.
inline Var gaussian_kl(Var mu, Var rho, double prior_sigma) {
  Tape& t = *mu.tape();
  const Matrix& m = mu.value();
  const Matrix& r = rho.value();
  detail::require(m.same_shape(r), "gaussian_kl: mu/rho shape mismatch");
  const double p2 = prior_sigma * prior_sigma;
  double kl = 0.0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    const double s = alphacal::softplus(r[k]);
    kl += std::log(prior_sigma / s) + (s * s + m[k] * m[k]) / (2.0 * p2) - 0.5;
  }
  return t.record(Matrix(1, 1, kl), {mu, rho}, [mu, rho, p2](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& m = mu.value();
    const Matrix& r = rho.value();
    if (t.needs_grad(mu)) {
      Matrix d(m.rows(), m.cols());
      for (std::size_t k = 0; k < m.size(); ++k) d[k] = g[0] * m[k] / p2;
      t.accumulate(mu, d);
    }
    if (t.needs_grad(rho)) {
      Matrix d(r.rows(), r.cols());
      for (std::size_t k = 0; k < r.size(); ++k) {
        const double s = alphacal::softplus(r[k]);
        d[k] = g[0] * (-1.0 / s + s / p2) * sigmoid(r[k]);
      }
      t.accumulate(rho, d);
    }
  });
}

}  // namespace ad
}  // namespace alphacal

#endif  // ALPHACAL_NDCORE_TAPE_HPP
