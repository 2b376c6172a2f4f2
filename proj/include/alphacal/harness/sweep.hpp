#ifndef ALPHACAL_HARNESS_SWEEP_HPP
#define ALPHACAL_HARNESS_SWEEP_HPP

// The α-sweep: every calibration method at every α on the grid, plus the
// uncalibrated model and models trained directly at each α.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "alphacal/calibration.hpp"
#include "alphacal/harness/config.hpp"
#include "alphacal/harness/csv.hpp"
#include "alphacal/harness/synthetic.hpp"
#include "alphacal/harness/train.hpp"

namespace alphacal::harness {

/// Method label for rows evaluating a model trained directly at α.
inline const std::string kTrainedLabel = "trained-BNN";

struct SweepRow {
  std::string method;
  double alpha = 0.0;
  std::string status = "ok";
  double area = 0.0;
  double test_nll = 0.0;
  double r2 = 0.0;
  double epistemic_trace = 0.0;
  bool warning = false;
  CoverageCurve curve;
};

struct SweepResult {
  std::vector<SweepRow> rows;  ///< sorted by (method, α)
};

inline std::vector<std::string> results_header() {
  return {"method", "alpha", "status", "area_score", "test_nll", "r2", "epistemic_trace", "warning"};
}

inline CsvTable results_table(const SweepResult& r) {
  CsvTable t{results_header(), {}};
  for (const auto& row : r.rows)
    t.rows.push_back({row.method, format_double(row.alpha), row.status, format_double(row.area),
                      format_double(row.test_nll), format_double(row.r2),
                      format_double(row.epistemic_trace), row.warning ? "1" : "0"});
  return t;
}

/// Reliability curves of every row: nominal, empirical, method, alpha.
inline CsvTable curves_table(const SweepResult& r) {
  CsvTable t{{"nominal", "empirical", "method", "alpha"}, {}};
  for (const auto& row : r.rows)
    for (std::size_t i = 0; i < row.curve.size(); ++i)
      t.rows.push_back({format_double(row.curve.nominal[i]), format_double(row.curve.empirical[i]),
                        row.method, format_double(row.alpha)});
  return t;
}

namespace detail {

// Runs jobs on `threads` workers; job i writes only slot i, so the result
// does not depend on scheduling.
inline void run_pool(std::vector<std::function<void()>>& jobs, std::size_t threads) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) jobs[i]();
  };
  if (threads <= 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, jobs.size()); ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

inline std::size_t method_index(Method m) {
  for (std::size_t i = 0; i < kProposedMethods.size(); ++i)
    if (kProposedMethods[i] == m) return i + 1;
  return 0;
}

inline void fill_row(SweepRow& row, const Evaluation& e) {
  row.area = e.area;
  row.test_nll = e.test_nll;
  row.r2 = e.r2;
  row.epistemic_trace = e.epistemic_trace;
  row.curve = e.curve;
}

}  // namespace detail

/// Runs the sweep for `base`, the model every calibrator starts from.
///
/// Test-set evaluation uses one Monte Carlo stream shared by every cell, so
/// methods that leave the network untouched see identical per-sample means.
/// α = 0 on the grid means the variational objective. Temperature-only
/// methods do not depend on α; they are fitted once and reported at each α.
/// A failing cell is recorded with its status and the sweep continues.
inline SweepResult sweep_alpha(const ExperimentConfig& c, const Splits& splits, const BnnModel& base) {
  const std::uint64_t eval_seed = derive_seed(c.seed, 100);
  const std::uint64_t val_seed = derive_seed(c.seed, 101);
  const auto& grid = c.alpha_grid;

  std::vector<SweepRow> rows;
  std::vector<std::function<void()>> jobs;
  auto cell = [&](std::string method, double alpha) -> std::size_t {
    SweepRow row;
    row.method = std::move(method);
    row.alpha = alpha;
    rows.push_back(std::move(row));
    return rows.size() - 1;
  };

  auto guarded = [&rows](std::size_t first, std::size_t count, std::function<void()> body) {
    return [&rows, first, count, body = std::move(body)] {
      try {
        body();
      } catch (const std::exception& e) {
        for (std::size_t i = first; i < first + count; ++i) rows[i].status = std::string("error: ") + e.what();
      }
    };
  };

  // Uncalibrated: one evaluation, repeated at each α.
  {
    const std::size_t first = rows.size();
    for (double a : grid) cell("none", a);
    jobs.push_back(guarded(first, grid.size(), [&, first] {
      const Evaluation e = evaluate(base, Calibrator{}, splits.test, c.k_eval, eval_seed, c.threshold);
      for (std::size_t i = 0; i < grid.size(); ++i) detail::fill_row(rows[first + i], e);
    }));
  }

  for (Method m : c.methods) {
    if (!is_last_layer(m)) {
      const std::size_t first = rows.size();
      for (double a : grid) cell(to_string(m), a);
      jobs.push_back(guarded(first, grid.size(), [&, first, m] {
        Rng vr(val_seed);
        const auto val = predictive_gaussians(calibrated_mc_predict(base, Calibrator{}, splits.val.x, c.k_eval, vr));
        const Calibrator cal = m == Method::sts ? fit_sts(val, splits.val.y) : fit_trilts(val, splits.val.y, c.trilts);
        const Evaluation e = evaluate(base, cal, splits.test, c.k_eval, eval_seed, c.threshold);
        for (std::size_t i = 0; i < grid.size(); ++i) {
          detail::fill_row(rows[first + i], e);
          rows[first + i].warning = cal.warning;
        }
      }));
      continue;
    }
    for (std::size_t ai = 0; ai < grid.size(); ++ai) {
      const double a = grid[ai];
      const std::size_t idx = cell(to_string(m), a);
      jobs.push_back(guarded(idx, 1, [&, idx, m, a, ai] {
        Rng rng(derive_seed(c.seed, 200 + detail::method_index(m), ai));
        const Calibrator cal = a == 0.0 ? fit_last_layer_vi(base, splits.val, m, c.fine_tune, rng)
                                        : fit_last_layer(base, splits.val, a, m, c.fine_tune, rng);
        detail::fill_row(rows[idx], evaluate(base, cal, splits.test, c.k_eval, eval_seed, c.threshold));
        rows[idx].warning = cal.warning;
      }));
    }
  }

  if (c.train_baselines) {
    for (std::size_t ai = 0; ai < grid.size(); ++ai) {
      const double a = grid[ai];
      const std::size_t idx = cell(kTrainedLabel, a);
      jobs.push_back(guarded(idx, 1, [&, idx, a] {
        const std::optional<double> alpha = a == 0.0 ? std::nullopt : std::optional<double>(a);
        const TrainResult tr = train(c, splits, alpha, c.seed);
        detail::fill_row(rows[idx], evaluate(tr.model, Calibrator{}, splits.test, c.k_eval, eval_seed, c.threshold));
        if (tr.diverged) rows[idx].status = "diverged";
      }));
    }
  }

  detail::run_pool(jobs, c.threads);
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& x, const SweepRow& y) {
    return x.method != y.method ? x.method < y.method : x.alpha < y.alpha;
  });
  return SweepResult{std::move(rows)};
}

inline SweepResult results_from_table(const CsvTable& t) {
  const std::size_t cm = t.column("method"), ca = t.column("alpha"), cs = t.column("status"),
                    car = t.column("area_score"), cn = t.column("test_nll"), cr = t.column("r2"),
                    ce = t.column("epistemic_trace"), cw = t.column("warning");
  SweepResult r;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& f = t.rows[i];
    const std::size_t line = i + 2;
    SweepRow row;
    row.method = f[cm];
    row.alpha = parse_double(f[ca], line);
    row.status = f[cs];
    row.area = parse_double(f[car], line);
    row.test_nll = parse_double(f[cn], line);
    row.r2 = parse_double(f[cr], line);
    row.epistemic_trace = parse_double(f[ce], line);
    if (f[cw] != "0" && f[cw] != "1") throw ParseError(line, "warning must be 0 or 1");
    row.warning = f[cw] == "1";
    r.rows.push_back(std::move(row));
  }
  return r;
}

/// Best α for a method: the smallest |α − 1| among grid points whose |area|
/// is within 1% of the minimum |area|.
inline std::optional<double> best_alpha(const SweepResult& r, const std::string& method) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& row : r.rows)
    if (row.method == method && row.status == "ok") best = std::min(best, std::abs(row.area));
  if (!std::isfinite(best)) return std::nullopt;
  std::optional<double> pick;
  for (const auto& row : r.rows) {
    if (row.method != method || row.status != "ok") continue;
    if (std::abs(row.area) <= best * 1.01 + 1e-15 &&
        (!pick || std::abs(row.alpha - 1.0) < std::abs(*pick - 1.0)))
      pick = row.alpha;
  }
  return pick;
}

}  // namespace alphacal::harness

#endif  // ALPHACAL_HARNESS_SWEEP_HPP
