// Command-line driver for the synthetic calibration experiments.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 numerical
// failure, 3 I/O or malformed data file.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "alphacal/calibration.hpp"
#include "alphacal/harness/config.hpp"
#include "alphacal/harness/csv.hpp"
#include "alphacal/harness/report.hpp"
#include "alphacal/harness/sweep.hpp"
#include "alphacal/harness/synthetic.hpp"
#include "alphacal/harness/train.hpp"

namespace fs = std::filesystem;
using namespace alphacal;
using namespace alphacal::harness;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitIo = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> alpha;
  std::optional<std::string> method;
  std::optional<std::string> out;
  std::string input;
  std::string calibrator;
};

ExperimentConfig load(const Options& o) {
  ExperimentConfig c;
  if (!o.config.empty()) {
    try {
      c = load_config(o.config);
    } catch (const ParseError& e) {
      throw UsageError(e.what());
    } catch (const DomainError& e) {
      throw UsageError(e.what());
    }
  }
  if (o.seed) c.seed = *o.seed;
  return c;
}

std::optional<double> parse_alpha(const std::string& s) {
  if (s == "vi" || s == "0") return std::nullopt;
  try {
    std::size_t used = 0;
    const double a = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    if (a == 0.0) return std::nullopt;
    return a;
  } catch (const std::exception&) {
    throw UsageError("--alpha must be a number or 'vi', got '" + s + "'");
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

Splits load_splits(const ExperimentConfig& c) {
  const LoadedDataset d = load_dataset(c.dataset);
  return split_dataset(d.data, d.split_seed);
}

BnnModel load_model(const std::string& path) {
  try {
    return model_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, path + ": " + e.what());
  }
}

int cmd_generate(const Options& o) {
  ExperimentConfig c = load(o);
  if (o.seed) c.task.seed = *o.seed;
  const std::string path = o.out.value_or(c.dataset);
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  write_dataset(path, generate_dataset(c.task, c.n_points), c.task);
  std::cout << "wrote " << path << " and " << meta_path_for(path) << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  ExperimentConfig c = load(o);
  if (o.alpha) c.train_alpha = parse_alpha(*o.alpha);
  const std::string dir = o.out.value_or(c.output_dir);
  ensure_dir(dir);
  const Splits s = load_splits(c);
  const TrainResult r = train(c, s, c.train_alpha, c.seed);
  write_text(join(dir, "model.json"), model_to_json(r.model).dump(1) + "\n");
  write_csv(join(dir, "loss.csv"), loss_table(r.losses));
  std::cout << "best epoch " << r.best_epoch << ", validation NLL " << format_double(r.best_val_nll) << "\n";
  if (r.diverged) {
    std::cerr << "training diverged; last good checkpoint written\n";
    return kExitNumerical;
  }
  return 0;
}

int cmd_calibrate(const Options& o) {
  ExperimentConfig c = load(o);
  if (!o.method) throw UsageError("calibrate needs --method");
  Method m;
  try {
    m = method_from_string(*o.method);
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
  if (m == Method::none) throw UsageError("--method none has nothing to fit");
  const std::string model_path = o.input.empty() ? join(c.output_dir, "model.json") : o.input;
  const BnnModel model = load_model(model_path);
  const Splits s = load_splits(c);
  Calibrator cal;
  if (is_last_layer(m)) {
    if (!o.alpha) throw UsageError("--alpha is required for " + to_string(m));
    const std::optional<double> a = parse_alpha(*o.alpha);
    Rng rng(derive_seed(c.seed, 300));
    cal = a ? fit_last_layer(model, s.val, *a, m, c.fine_tune, rng)
            : fit_last_layer_vi(model, s.val, m, c.fine_tune, rng);
  } else {
    Rng vr(derive_seed(c.seed, 101));
    const auto val = predictive_gaussians(calibrated_mc_predict(model, Calibrator{}, s.val.x, c.k_eval, vr));
    cal = m == Method::sts ? fit_sts(val, s.val.y) : fit_trilts(val, s.val.y, c.trilts);
  }
  const std::string path = o.out.value_or(join(c.output_dir, "calibrator_" + file_stem(to_string(m)) + ".json"));
  write_text(path, calibrator_to_json(cal).dump(1) + "\n");
  if (cal.warning) std::cerr << "warning: " << cal.note << "\n";
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_evaluate(const Options& o) {
  ExperimentConfig c = load(o);
  const std::string model_path = o.input.empty() ? join(c.output_dir, "model.json") : o.input;
  const BnnModel model = load_model(model_path);
  Calibrator cal;
  if (!o.calibrator.empty()) {
    try {
      cal = calibrator_from_json(nlohmann::json::parse(read_text(o.calibrator)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(0, o.calibrator + ": " + e.what());
    }
  }
  const Splits s = load_splits(c);
  const Evaluation e = evaluate(model, cal, s.test, c.k_eval, derive_seed(c.seed, 100), c.threshold);
  const std::string dir = o.out.value_or(c.output_dir);
  ensure_dir(dir);
  CsvTable metrics{{"method", "alpha", "area_score", "test_nll", "r2", "epistemic_trace"},
                   {{to_string(cal.method), format_double(cal.alpha), format_double(e.area),
                     format_double(e.test_nll), format_double(e.r2), format_double(e.epistemic_trace)}}};
  write_csv(join(dir, "evaluation.csv"), metrics);
  CsvTable curve{{"nominal", "empirical", "method", "alpha"}, {}};
  for (std::size_t i = 0; i < e.curve.size(); ++i)
    curve.rows.push_back({format_double(e.curve.nominal[i]), format_double(e.curve.empirical[i]),
                          to_string(cal.method), format_double(cal.alpha)});
  write_csv(join(dir, "evaluation_curve.csv"), curve);
  std::cout << to_csv_string(metrics);
  return 0;
}

int cmd_sweep(const Options& o) {
  ExperimentConfig c = load(o);
  const std::string model_path = o.input.empty() ? join(c.output_dir, "model.json") : o.input;
  const BnnModel model = load_model(model_path);
  const Splits s = load_splits(c);
  const std::string dir = o.out.value_or(c.output_dir);
  ensure_dir(dir);
  const SweepResult r = sweep_alpha(c, s, model);
  write_csv(join(dir, "results.csv"), results_table(r));
  write_csv(join(dir, "curves.csv"), curves_table(r));
  std::size_t failed = 0;
  for (const auto& row : r.rows) failed += row.status != "ok";
  std::cout << "wrote " << r.rows.size() << " rows (" << failed << " failed) to " << join(dir, "results.csv") << "\n";
  return 0;
}

int cmd_report(const Options& o) {
  ExperimentConfig c = load(o);
  const std::string input = o.input.empty() ? join(c.output_dir, "curves.csv") : o.input;
  const std::string dir = o.out.value_or(join(c.output_dir, "report"));
  for (const auto& f : write_report(curves_from_table(read_csv(input)), dir)) std::cout << f << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian neural network calibration experiments"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "override the configured seed");
    sub->add_option("--out", o.out, "output file or directory");
  };
  auto* gen = app.add_subcommand("generate-data", "write a synthetic dataset and its sidecar");
  common(gen);
  auto* tr = app.add_subcommand("train", "train a model; writes model.json and loss.csv");
  common(tr);
  tr->add_option("--alpha", o.alpha, "training alpha, or 'vi'");
  auto* cal = app.add_subcommand("calibrate", "fit one calibrator on the validation split");
  common(cal);
  cal->add_option("--method", o.method, "sTS, TrilTS, LL, sLL, TrilLL, LLmu, sLLmean or TrilLLmean");
  cal->add_option("--alpha", o.alpha, "alpha for last-layer methods, or 'vi'");
  cal->add_option("checkpoint", o.input, "model checkpoint (default <output_dir>/model.json)");
  auto* ev = app.add_subcommand("evaluate", "metrics of a model on the test split");
  common(ev);
  ev->add_option("checkpoint", o.input, "model checkpoint (default <output_dir>/model.json)");
  ev->add_option("--calibrator", o.calibrator, "calibrator JSON to apply")->check(CLI::ExistingFile);
  auto* sw = app.add_subcommand("sweep-alpha", "every method at every alpha; writes results.csv and curves.csv");
  common(sw);
  sw->add_option("checkpoint", o.input, "model checkpoint (default <output_dir>/model.json)");
  auto* rep = app.add_subcommand("report", "reliability CSVs and SVG plots from curves.csv");
  common(rep);
  rep->add_option("curves", o.input, "curves CSV (default <output_dir>/curves.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*tr) return cmd_train(o);
    if (*cal) return cmd_calibrate(o);
    if (*ev) return cmd_evaluate(o);
    if (*sw) return cmd_sweep(o);
    if (*rep) return cmd_report(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ParseError& e) {
    std::cerr << "malformed input: " << e.what() << "\n";
    return kExitIo;
  } catch (const NonFiniteError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DecompositionError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
