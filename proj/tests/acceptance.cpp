// Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.
//
//   acceptance [--config FILE] [--work-dir DIR] [--threads N]
//
// Criteria 1-4 are property checks on the library. Criteria 5-10 run the
// desk-scale pipeline on the miscalibrated fixture, configs/fixture.json by
// default (twice, for 10). The fixture pins the predicted covariance below
// the true noise, so every trained network is overconfident.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "alphacal/calibration.hpp"
#include "alphacal/harness/config.hpp"
#include "alphacal/harness/report.hpp"
#include "alphacal/harness/sweep.hpp"
#include "alphacal/harness/synthetic.hpp"
#include "alphacal/harness/train.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace alphacal;
using namespace alphacal::harness;
using alphacal::testing::max_gradient_error;
using alphacal::testing::random_lower;
using alphacal::testing::random_matrix;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1-4: library properties ------------------------------------------------

BnnModel tiny_model(std::uint64_t seed) {
  Rng rng(seed);
  BnnModel m = BnnModel::create(Architecture{2, {3}, 2, 0.3}, 1.0, rng);
  for (auto& l : m.layers)
    for (double& v : l.weight_rho.data()) v = softplus_inverse(0.2 * rng.uniform(0.5, 1.5));
  return m;
}

double objective_gradient_error(std::optional<double> alpha, std::uint64_t seed) {
  const BnnModel m = tiny_model(seed);
  Rng rng(seed + 1);
  const Batch b{random_matrix(3, 2, rng), random_matrix(3, 2, rng)};
  const auto noise = alphacal::detail::draw_samples(m, b.size(), 3, rng);
  std::vector<Matrix> inputs;
  for (const auto& l : m.layers)
    for (const Matrix* p : {&l.weight_mean, &l.weight_rho, &l.bias_mean, &l.bias_rho}) inputs.push_back(*p);
  auto f = [&](Tape& t, const std::vector<Var>& v) -> Var {
    std::vector<LayerVars> layers;
    std::vector<KlBlock> kl;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      layers.push_back({v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3], 1.0});
      for (const auto& blk : kl_blocks(layers.back())) kl.push_back(blk);
    }
    return build_objective(layers, m.negative_slope, m.output_dim, kl, t.constant(b.x), b.y, noise,
                           ObjectiveSettings{alpha, 0.3, 10.0})
        .total;
  };
  return max_gradient_error(f, inputs);
}

Outcome gradient_correctness() {
  constexpr int kInstances = 20;
  std::map<std::string, double> worst;
  Rng rng(1);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t n = 1 + i % 3;
    const Matrix raw = random_matrix(2, raw_head_size(n), rng, 0.7);
    const Matrix y = random_matrix(2, n, rng);
    auto nll_f = [&](Tape&, const std::vector<Var>& v) {
      Var chol = ad::tril_positive_diagonal(ad::cols(v[0], n, tril_size(n)), n, kCholeskyFloor);
      return ad::sum(ad::gaussian_nll(ad::cols(v[0], 0, n), chol, y));
    };
    worst["NLL"] = std::max(worst["NLL"], max_gradient_error(nll_f, {raw}));

    const std::size_t in = 2 + i % 3, out = 1 + i % 4;
    VariationalLayer layer = VariationalLayer::create(in, out, 1.0, rng);
    for (double& v : layer.weight_rho.data()) v = softplus_inverse(rng.uniform(0.05, 0.5));
    const FlipoutNoise noise = draw_flipout_noise(layer, 3, rng);
    const Matrix x = random_matrix(3, in, rng), w = random_matrix(3, out, rng);
    auto flip_f = [&](Tape& t, const std::vector<Var>& v) {
      LayerVars l{v[0], v[1], v[2], v[3], 1.0};
      return ad::sum(ad::mul(ad::leaky_relu(forward_flipout(l, v[4], noise), 0.3), t.constant(w)));
    };
    worst["Flipout"] = std::max(
        worst["Flipout"],
        max_gradient_error(flip_f, {layer.weight_mean, layer.weight_rho, layer.bias_mean, layer.bias_rho, x}));

    worst["VI"] = std::max(worst["VI"], objective_gradient_error(std::nullopt, 100 + i));
    for (double a : {-1.0, 0.5, 1.0, 2.0}) {
      const std::string key = "BB-alpha " + format_double(a);
      worst[key] = std::max(worst[key], objective_gradient_error(a, 200 + 10 * i + static_cast<int>(4 * a)));
    }
  }
  Outcome o{true, std::to_string(kInstances) + " instances each, worst relative error:"};
  for (const auto& [name, e] : worst) {
    o.pass = o.pass && e < 1e-4;
    o.detail += " " + name + " " + fmt("%.1e", e) + ";";
  }
  return o;
}

Outcome alpha_zero_limit() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const BnnModel m = tiny_model(500 + s);
    Rng brng(600 + s);
    const Batch b{random_matrix(16, 2, brng), random_matrix(16, 2, brng)};
    Rng r1(700 + s), r2(700 + s);
    const double bb = bb_alpha_loss(m, b, 1e-3, 1, r1, 1.0).data_term;
    const double vi = vi_loss(m, b, 1, r2, 1.0).data_term;
    worst = std::max(worst, std::abs(bb - vi) / std::abs(vi));
  }
  return {worst <= 1e-4, "alpha=1e-3, k=1 vs VI data term, worst relative gap " + fmt("%.1e", worst) + " (tol 1e-4)"};
}

struct Residuals {
  std::vector<GaussianPrediction> preds;
  Matrix targets;
};

Residuals gaussian_residuals(std::size_t d, std::size_t n, double c, std::uint64_t seed) {
  Rng rng(seed);
  Residuals r;
  r.targets = Matrix(d, n);
  for (std::size_t i = 0; i < d; ++i) {
    GaussianPrediction p{random_matrix(1, n, rng).data(), random_lower(n, rng)};
    GaussianPrediction truth = p;
    truth.chol *= std::sqrt(c);
    const auto y = sample(truth, rng);
    for (std::size_t j = 0; j < n; ++j) r.targets(i, j) = y[j];
    r.preds.push_back(std::move(p));
  }
  return r;
}

Outcome temperature_recovery() {
  Outcome o{true, ""};
  for (double c : {0.25, 4.0}) {
    const auto r = gaussian_residuals(10000, 3, c, 11);
    const double s = *fit_sts(r.preds, r.targets).scale;
    const double rel = std::abs(s / c - 1.0);
    o.pass = o.pass && rel <= 0.05;
    o.detail += "c=" + format_double(c) + " s=" + fmt("%.4f", s) + " (" + fmt("%.2f", 100 * rel) + "%); ";
  }
  o.detail += "tol 5%";
  return o;
}

Outcome coverage_correctness() {
  const auto r = gaussian_residuals(10000, 3, 1.0, 12);
  const auto c = coverage_curve(r.preds, r.targets, default_coverage_grid(), ThresholdMode::chi2);
  double worst = 0.0;
  for (std::size_t g = 0; g < c.size(); ++g) worst = std::max(worst, std::abs(c.empirical[g] - c.nominal[g]));
  const double a = area_score(c);
  return {c.size() == 99 && worst <= 0.015 && std::abs(a) <= 0.01,
          "max |empirical - nominal| " + fmt("%.4f", worst) + " (tol 0.015), area " + fmt("%.4f", a) +
              " (tol 0.01)"};
}

// ---- 5-10: desk-scale pipeline ------------------------------------------------

/// Loads the miscalibrated fixture and points its files into `dir`.
ExperimentConfig fixture_config(const fs::path& config, const fs::path& dir, std::size_t threads) {
  ExperimentConfig c = load_config(config.string());
  c.dataset = (dir / "data" / "synthetic.csv").string();
  c.output_dir = (dir / "out").string();
  c.threads = threads;
  return c;
}

struct PipelineRun {
  ExperimentConfig config;
  Splits splits;
  BnnModel base;
  SweepResult sweep;
  std::string results_csv;
  std::string curves_csv;
};

PipelineRun run_pipeline(const fs::path& config, const fs::path& dir, std::size_t threads) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(dir);
  PipelineRun run;
  run.config = fixture_config(config, dir, threads);
  const ExperimentConfig& c = run.config;
  fs::create_directories(fs::path(c.dataset).parent_path());
  fs::create_directories(c.output_dir);
  write_text((dir / "config.json").string(), config_to_json(c).dump(2) + "\n");

  write_dataset(c.dataset, generate_dataset(c.task, c.n_points), c.task);
  const LoadedDataset d = load_dataset(c.dataset);
  run.splits = split_dataset(d.data, d.split_seed);

  const TrainResult tr = train(c, run.splits, c.train_alpha, c.seed);
  if (tr.diverged) throw NonFiniteError("fixture training diverged");
  run.base = tr.model;
  write_text((fs::path(c.output_dir) / "model.json").string(), model_to_json(run.base).dump(1) + "\n");
  std::printf("  [%s] base model trained (%.0f s)\n", dir.filename().c_str(), seconds_since(t0));
  std::fflush(stdout);

  run.sweep = sweep_alpha(c, run.splits, run.base);
  const std::string results = (fs::path(c.output_dir) / "results.csv").string();
  const std::string curves = (fs::path(c.output_dir) / "curves.csv").string();
  write_csv(results, results_table(run.sweep));
  write_csv(curves, curves_table(run.sweep));
  write_report(curves_from_table(read_csv(curves)), (fs::path(c.output_dir) / "report").string());
  run.results_csv = read_text(results);
  run.curves_csv = read_text(curves);
  std::printf("  [%s] sweep finished (%.0f s)\n", dir.filename().c_str(), seconds_since(t0));
  std::fflush(stdout);
  return run;
}

const SweepRow* find_row(const SweepResult& r, const std::string& method, double alpha) {
  for (const auto& row : r.rows)
    if (row.method == method && row.alpha == alpha) return &row;
  return nullptr;
}

bool ok(const SweepRow* row) { return row && row->status == "ok"; }

Outcome trained_are_overconfident(const SweepResult& r) {
  Outcome o{true, ""};
  for (double a : {-1.0, 1.0, 2.0}) {
    const SweepRow* row = find_row(r, kTrainedLabel, a);
    const bool pass = ok(row) && row->area < -0.02;
    o.pass = o.pass && pass;
    o.detail += "alpha=" + format_double(a) + " area " + (row ? fmt("%.4f", row->area) + " " + row->status : "missing") +
                "; ";
  }
  o.detail += "need < -0.02";
  return o;
}

Outcome calibration_succeeds(const SweepResult& r, const std::vector<Method>& methods) {
  const SweepRow* none = nullptr;
  for (const auto& row : r.rows)
    if (row.method == "none") none = &row;
  if (!ok(none)) return {false, "uncalibrated row missing or failed"};
  Outcome o{true, "uncalibrated area " + fmt("%.4f", none->area) + ";"};
  for (Method m : methods) {
    double best = std::numeric_limits<double>::infinity(), at = 0.0;
    for (const auto& row : r.rows)
      if (row.method == to_string(m) && row.status == "ok" && row.alpha >= 0.5 && row.alpha <= 2.0 &&
          std::abs(row.area) < best) {
        best = std::abs(row.area);
        at = row.alpha;
      }
    const bool pass = best < 0.03 && best < std::abs(none->area);
    o.pass = o.pass && pass;
    o.detail += " " + to_string(m) + " " + (std::isfinite(best) ? fmt("%.4f", best) + "@" + format_double(at) : "none") +
                (pass ? "" : " (fail)") + ";";
  }
  o.detail += " need |area| < 0.03 and below uncalibrated";
  return o;
}

Outcome ll_nll_shape(const SweepResult& r) {
  const std::string ll = to_string(Method::ll);
  const SweepRow* best = nullptr;
  for (const auto& row : r.rows)
    if (row.method == ll && row.status == "ok" && (!best || row.test_nll < best->test_nll)) best = &row;
  if (!best) return {false, "no LL rows"};
  Outcome o{best->alpha >= 0.5 && best->alpha <= 1.5,
            "LL NLL minimum " + fmt("%.4f", best->test_nll) + " at alpha=" + format_double(best->alpha) +
                " (need alpha in [0.5, 1.5]);"};
  std::size_t compared = 0, worse = 0;
  std::string failures;
  for (const auto& row : r.rows) {
    if (row.method != ll || row.status != "ok") continue;
    const SweepRow* trained = find_row(r, kTrainedLabel, row.alpha);
    if (!ok(trained)) continue;
    ++compared;
    if (!(row.test_nll < trained->test_nll)) {
      ++worse;
      failures += " alpha=" + format_double(row.alpha) + " " + fmt("%.4f", row.test_nll) + " vs " +
                  fmt("%.4f", trained->test_nll);
    }
  }
  o.pass = o.pass && compared > 0 && worse == 0;
  o.detail += " LL beats trained-at-alpha NLL at " + std::to_string(compared - worse) + "/" +
              std::to_string(compared) + " grid points" + failures;
  return o;
}

Outcome epistemic_shape(const SweepResult& r, const std::vector<Method>& methods) {
  Outcome o{true, ""};
  const double grid[] = {-1.0, 0.0, 1.0, 2.0};
  for (Method m : methods) {
    if (!is_last_layer(m)) continue;
    std::string trace;
    bool pass = true;
    double prev = -1.0;
    for (double a : grid) {
      const SweepRow* row = find_row(r, to_string(m), a);
      if (!ok(row)) {
        pass = false;
        trace += " ?";
        continue;
      }
      if (prev >= 0.0 && row->epistemic_trace < 0.95 * prev) pass = false;
      prev = row->epistemic_trace;
      trace += " " + fmt("%.4f", row->epistemic_trace);
    }
    o.pass = o.pass && pass;
    o.detail += to_string(m) + trace + (pass ? "" : " (fail)") + "; ";
  }
  for (Method m : {Method::sts, Method::trilts}) {
    bool same = true;
    for (const auto& row : r.rows) {
      if (row.method != to_string(m)) continue;
      const SweepRow* none = find_row(r, "none", row.alpha);
      same = same && ok(&row) && ok(none) &&
             std::memcmp(&row.epistemic_trace, &none->epistemic_trace, sizeof(double)) == 0;
    }
    o.pass = o.pass && same;
    o.detail += to_string(m) + (same ? " epistemic bit-identical" : " epistemic differs") + "; ";
  }
  o.detail += "alpha -1, 0, 1, 2; 5% step tolerance";
  return o;
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

Outcome means_preserved(const PipelineRun& run) {
  const ExperimentConfig& c = run.config;
  Rng vr(derive_seed(c.seed, 101));
  const auto val = predictive_gaussians(calibrated_mc_predict(run.base, Calibrator{}, run.splits.val.x, c.k_eval, vr));
  Rng r0(derive_seed(c.seed, 100));
  const auto plain = calibrated_mc_predict(run.base, Calibrator{}, run.splits.test.x, c.k_eval, r0);
  Outcome o{true, ""};
  for (Method m : {Method::sts, Method::trilts}) {
    const Calibrator cal = m == Method::sts ? fit_sts(val, run.splits.val.y) : fit_trilts(val, run.splits.val.y, c.trilts);
    Rng r1(derive_seed(c.seed, 100));
    const auto scaled = calibrated_mc_predict(run.base, cal, run.splits.test.x, c.k_eval, r1);
    bool same_mu = scaled.size() == plain.size();
    for (std::size_t i = 0; same_mu && i < plain.size(); ++i)
      for (std::size_t k = 0; same_mu && k < plain[i].k(); ++k)
        for (std::size_t j = 0; same_mu && j < plain[i].dim(); ++j)
          same_mu = bit_equal(plain[i].samples[k].mean[j], scaled[i].samples[k].mean[j]);
    bool same_r2 = true;
    for (const auto& row : run.sweep.rows) {
      if (row.method != to_string(m)) continue;
      const SweepRow* none = find_row(run.sweep, "none", row.alpha);
      same_r2 = same_r2 && ok(&row) && ok(none) && bit_equal(row.r2, none->r2);
    }
    o.pass = o.pass && same_mu && same_r2;
    o.detail += to_string(m) + ": means " + (same_mu ? "identical" : "differ") + ", R2 " +
                (same_r2 ? "identical" : "differs") + "; ";
  }
  return o;
}

struct Options {
  fs::path config = ALPHACAL_FIXTURE_CONFIG;
  fs::path work_dir = fs::temp_directory_path() / "alphacal_acceptance";
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
};

std::optional<Options> parse_args(int argc, char** argv) {
  Options o;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) {
      o.config = argv[++i];
    } else if (arg == "--work-dir" && i + 1 < argc) {
      o.work_dir = argv[++i];
    } else if (arg == "--threads" && i + 1 < argc) {
      o.threads = std::max(1, std::atoi(argv[++i]));
    } else {
      return std::nullopt;
    }
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  const auto opts = parse_args(argc, argv);
  if (!opts) {
    std::fprintf(stderr, "usage: acceptance [--config FILE] [--work-dir DIR] [--threads N]\n");
    return 1;
  }

  int failures = 0;
  auto report = [&](int n, const std::function<Outcome()>& check) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d: %s  %s [%.1f s]\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
  };

  report(1, gradient_correctness);
  report(2, alpha_zero_limit);
  report(3, temperature_recovery);
  report(4, coverage_correctness);

  std::optional<PipelineRun> first;
  std::string pipeline_error;
  try {
    first = run_pipeline(opts->config, opts->work_dir / "run1", opts->threads);
  } catch (const std::exception& e) {
    pipeline_error = e.what();
  }
  auto with_run = [&](std::function<Outcome(const PipelineRun&)> f) {
    return [&, f] { return first ? f(*first) : Outcome{false, "pipeline failed: " + pipeline_error}; };
  };
  report(5, with_run([](const PipelineRun& r) { return trained_are_overconfident(r.sweep); }));
  report(6, with_run([](const PipelineRun& r) { return calibration_succeeds(r.sweep, r.config.methods); }));
  report(7, with_run([](const PipelineRun& r) { return ll_nll_shape(r.sweep); }));
  report(8, with_run([](const PipelineRun& r) { return epistemic_shape(r.sweep, r.config.methods); }));
  report(9, with_run(means_preserved));
  report(10, with_run([&](const PipelineRun& r) {
    const PipelineRun second = run_pipeline(opts->config, opts->work_dir / "run2", opts->threads);
    const bool same = r.results_csv == second.results_csv && r.curves_csv == second.curves_csv;
    return Outcome{same, std::string("second run results.csv and curves.csv ") +
                             (same ? "byte-identical" : "differ") + " (" +
                             std::to_string(r.results_csv.size()) + " bytes)"};
  }));

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
