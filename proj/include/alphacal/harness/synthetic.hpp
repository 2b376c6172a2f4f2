#ifndef ALPHACAL_HARNESS_SYNTHETIC_HPP
#define ALPHACAL_HARNESS_SYNTHETIC_HPP

// Heteroscedastic synthetic regression tasks, dataset files and the
// train/validation/test split.
//
// Task "affine_sin": for x drawn uniformly from [-input_range, input_range]^M,
//   f(x)_j = Σ_i x_i A_ij + sin(Σ_i x_i B_ij + c_j)
//   y = f(x) + L(x) z,  z ~ 𝒩(0, I_N)
// with L(x) lower-triangular:
//   L_jj = noise_scale · (0.5 + sigmoid(x_{j mod M}))
//   L_ij = noise_scale · noise_coupling   (i > j)
// A and B have entries 𝒩(0, 1/M), c uniform on [0, 2π), all drawn
// from an Rng seeded with the task seed in that order.
//
// Task "affine" drops the sinusoid: f(x)_j = Σ_i x_i A_ij, same coefficients.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/harness/csv.hpp"
#include "alphacal/losses.hpp"
#include "alphacal/ndcore/linalg.hpp"
#include "alphacal/ndcore/matrix.hpp"
#include "alphacal/ndcore/rng.hpp"
#include "json.hpp"

namespace alphacal::harness {

struct SyntheticTask {
  std::string function = "affine_sin";
  std::size_t input_dim = 8;
  std::size_t output_dim = 3;
  double input_range = 2.0;
  double noise_scale = 0.3;
  double noise_coupling = 0.3;
  std::uint64_t seed = 1;

  friend bool operator==(const SyntheticTask&, const SyntheticTask&) = default;
};

struct TaskCoefficients {
  Matrix a;  ///< M×N
  Matrix b;  ///< M×N
  std::vector<double> phase;
  bool sinusoid = true;
};

inline bool known_task_function(const std::string& id) { return id == "affine_sin" || id == "affine"; }

inline std::string task_function_definition(const std::string& id) {
  return id == "affine" ? "f_j(x) = sum_i x_i A_ij"
                        : "f_j(x) = sum_i x_i A_ij + sin(sum_i x_i B_ij + c_j)";
}

inline TaskCoefficients task_coefficients(const SyntheticTask& task) {
  if (!known_task_function(task.function))
    throw DomainError("unknown task function '" + task.function + "'");
  if (task.input_dim == 0 || task.output_dim == 0) throw DomainError("task dimensions must be >= 1");
  Rng rng(task.seed);
  TaskCoefficients c{Matrix(task.input_dim, task.output_dim), Matrix(task.input_dim, task.output_dim),
                     std::vector<double>(task.output_dim)};
  const double sa = 1.0 / std::sqrt(static_cast<double>(task.input_dim));
  for (std::size_t k = 0; k < c.a.size(); ++k) c.a[k] = sa * rng.normal();
  for (std::size_t k = 0; k < c.b.size(); ++k) c.b[k] = sa * rng.normal();
  for (double& p : c.phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
  c.sinusoid = task.function == "affine_sin";
  return c;
}

inline std::vector<double> task_function(const TaskCoefficients& c, std::span<const double> x) {
  const std::size_t n = c.phase.size();
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double lin = 0.0, arg = c.phase[j];
    for (std::size_t i = 0; i < x.size(); ++i) {
      lin += x[i] * c.a(i, j);
      arg += x[i] * c.b(i, j);
    }
    out[j] = c.sinusoid ? lin + std::sin(arg) : lin;
  }
  return out;
}

inline Matrix noise_cholesky(const SyntheticTask& task, std::span<const double> x) {
  const std::size_t n = task.output_dim;
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    l(i, i) = task.noise_scale * (0.5 + sigmoid(x[i % x.size()]));
    for (std::size_t j = 0; j < i; ++j) l(i, j) = task.noise_scale * task.noise_coupling;
  }
  return l;
}

struct Dataset {
  Matrix x;
  Matrix y;
  std::size_t size() const noexcept { return x.rows(); }
};

/// Draws `n` points. Inputs, then noise, are drawn point by point from an
/// Rng seeded with the task seed advanced past the coefficients.
inline Dataset generate_dataset(const SyntheticTask& task, std::size_t n) {
  if (n == 0) throw DomainError("generate_dataset: need at least one point");
  const TaskCoefficients c = task_coefficients(task);
  Rng rng(task.seed);
  rng = rng.split();
  Dataset d{Matrix(n, task.input_dim), Matrix(n, task.output_dim)};
  std::vector<double> z(task.output_dim);
  for (std::size_t p = 0; p < n; ++p) {
    auto x = d.x.row(p);
    for (double& v : x) v = rng.uniform(-task.input_range, task.input_range);
    const auto f = task_function(c, x);
    for (double& v : z) v = rng.normal();
    const Matrix l = noise_cholesky(task, x);
    for (std::size_t i = 0; i < task.output_dim; ++i) {
      double e = 0.0;
      for (std::size_t j = 0; j <= i; ++j) e += l(i, j) * z[j];
      d.y(p, i) = f[i] + e;
    }
  }
  return d;
}

inline std::string meta_path_for(const std::string& csv_path) {
  std::filesystem::path p(csv_path);
  p.replace_extension(".meta.json");
  return p.string();
}

inline nlohmann::json task_to_json(const SyntheticTask& t) {
  return {{"function", t.function},     {"input_dim", t.input_dim},
          {"output_dim", t.output_dim}, {"input_range", t.input_range},
          {"noise_scale", t.noise_scale}, {"noise_coupling", t.noise_coupling},
          {"seed", t.seed}};
}

inline SyntheticTask task_from_json(const nlohmann::json& j) {
  SyntheticTask t;
  t.function = j.at("function").get<std::string>();
  t.input_dim = j.at("input_dim").get<std::size_t>();
  t.output_dim = j.at("output_dim").get<std::size_t>();
  t.input_range = j.at("input_range").get<double>();
  t.noise_scale = j.at("noise_scale").get<double>();
  t.noise_coupling = j.at("noise_coupling").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

/// Writes `<path>` (header x_0..x_{M-1},y_0..y_{N-1}) and the sidecar
/// `<stem>.meta.json` describing the generative truth.
inline void write_dataset(const std::string& path, const Dataset& d, const SyntheticTask& task) {
  CsvTable t;
  for (std::size_t i = 0; i < d.x.cols(); ++i) t.header.push_back("x_" + std::to_string(i));
  for (std::size_t i = 0; i < d.y.cols(); ++i) t.header.push_back("y_" + std::to_string(i));
  for (std::size_t r = 0; r < d.size(); ++r) {
    auto row = format_row(d.x.row(r));
    for (double v : d.y.row(r)) row.push_back(format_double(v));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);

  const TaskCoefficients c = task_coefficients(task);
  nlohmann::json meta{
      {"format", "alphacal-dataset"},
      {"version", 1},
      {"n_points", d.size()},
      {"task", task_to_json(task)},
      {"function_definition", task_function_definition(task.function)},
      {"noise_cholesky",
       "L_jj(x) = noise_scale*(0.5 + sigmoid(x_{j mod M})); L_ij = noise_scale*noise_coupling for i > j"},
      {"coefficients", {{"A", c.a.data()}, {"B", c.b.data()}, {"c", c.phase}}},
      {"split", {{"train", 0.7}, {"val", 0.1}, {"test", 0.2}, {"seed", task.seed}}}};
  write_text(meta_path_for(path), meta.dump(2) + "\n");
}

struct LoadedDataset {
  Dataset data;
  std::uint64_t split_seed = 0;
};

/// Reads a dataset CSV; the split seed comes from the sidecar when present.
inline LoadedDataset load_dataset(const std::string& path) {
  const CsvTable t = read_csv(path);
  std::vector<std::size_t> xs, ys;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    const std::string& h = t.header[i];
    if (h == "x_" + std::to_string(xs.size()))
      xs.push_back(i);
    else if (h == "y_" + std::to_string(ys.size()))
      ys.push_back(i);
    else
      throw ParseError(1, "unexpected dataset column '" + h + "'");
  }
  if (xs.empty() || ys.empty()) throw ParseError(1, "dataset needs x_ and y_ columns");
  if (t.rows.empty()) throw ParseError(2, "dataset has no rows");
  LoadedDataset out{{numeric_columns(t, xs), numeric_columns(t, ys)}, 0};
  const std::string meta = meta_path_for(path);
  if (std::filesystem::exists(meta)) {
    try {
      out.split_seed = nlohmann::json::parse(read_text(meta)).at("split").at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(0, meta + ": " + e.what());
    }
  }
  return out;
}

struct Splits {
  Batch train;
  Batch val;
  Batch test;
};

/// Seeded shuffle, then the first 70% train, next 10% validation, rest test.
inline Splits split_dataset(const Dataset& d, std::uint64_t seed) {
  const std::size_t n = d.size();
  const std::size_t n_train = n * 7 / 10;
  const std::size_t n_val = n / 10;
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw DomainError("split_dataset: need at least 10 points");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed ^ 0x5eed5eed5eed5eedULL);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  auto take = [&](std::size_t from, std::size_t count) {
    Batch b{Matrix(count, d.x.cols()), Matrix(count, d.y.cols())};
    for (std::size_t r = 0; r < count; ++r) {
      const std::size_t src = order[from + r];
      std::copy(d.x.row(src).begin(), d.x.row(src).end(), b.x.row(r).begin());
      std::copy(d.y.row(src).begin(), d.y.row(src).end(), b.y.row(r).begin());
    }
    return b;
  };
  return {take(0, n_train), take(n_train, n_val), take(n_train + n_val, n - n_train - n_val)};
}

}  // namespace alphacal::harness

#endif  // ALPHACAL_HARNESS_SYNTHETIC_HPP
