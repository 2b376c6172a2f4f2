#ifndef ALPHACAL_HARNESS_CONFIG_HPP
#define ALPHACAL_HARNESS_CONFIG_HPP

// Experiment configuration, read from JSON. Unknown keys are rejected so a
// typo cannot silently fall back to a default.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "alphacal/calibration.hpp"
#include "alphacal/error.hpp"
#include "alphacal/harness/csv.hpp"
#include "alphacal/harness/synthetic.hpp"
#include "alphacal/metrics.hpp"
#include "json.hpp"

namespace alphacal::harness {

inline std::vector<double> default_alpha_grid() {
  return {-2.0, -1.0, -0.5, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0};
}

inline std::vector<Method> default_methods() {
  return {kProposedMethods.begin(), kProposedMethods.end()};
}

struct ExperimentConfig {
  std::uint64_t seed = 1;

  // Data.
  SyntheticTask task{};
  std::size_t n_points = 14286;  ///< 10⁴ training points after the 70/10/20 split
  std::string dataset = "data/synthetic.csv";
  std::string output_dir = "out";

  // Model and training.
  std::vector<std::size_t> hidden{64, 64};
  double prior_sigma = 1.0;
  std::optional<double> train_alpha;  ///< nullopt: variational objective
  std::size_t k_train = 2;
  std::size_t k_eval = 64;
  std::size_t k_val = 16;  ///< samples for the per-epoch validation NLL
  std::size_t epochs = 40;
  std::size_t batch_size = 128;
  double learning_rate = 3e-3;
  double kl_weight = 1.0;
  std::size_t kl_warmup_epochs = 0;  ///< linear ramp 0 → kl_weight
  /// When > 0, the covariance outputs of the head are pinned to
  /// aleatoric_bottleneck·I (zero weights, fixed biases) and never trained.
  double aleatoric_bottleneck = 0.0;

  // Calibration sweep.
  std::vector<Method> methods = default_methods();
  std::vector<double> alpha_grid = default_alpha_grid();
  FineTuneSettings fine_tune{};
  TrilFitSettings trilts{};
  ThresholdMode threshold = ThresholdMode::chi2;
  bool train_baselines = true;
  std::size_t threads = 1;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw DomainError(std::string("config: ") + name + " must be >= 1");
    };
    positive(n_points, "n_points");
    positive(task.input_dim, "task.input_dim");
    positive(task.output_dim, "task.output_dim");
    if (!known_task_function(task.function))
      throw DomainError("config: unknown task function '" + task.function + "'");
    if (!(task.input_range > 0.0)) throw DomainError("config: task.input_range must be > 0");
    if (!(task.noise_scale >= 0.0)) throw DomainError("config: task.noise_scale must be >= 0");
    positive(k_train, "k_train");
    positive(k_eval, "k_eval");
    positive(k_val, "k_val");
    positive(epochs, "epochs");
    positive(batch_size, "batch_size");
    positive(threads, "threads");
    positive(fine_tune.k, "fine_tune.k");
    positive(fine_tune.eval_every, "fine_tune.eval_every");
    for (std::size_t w : hidden) positive(w, "hidden width");
    if (!(prior_sigma > 0.0)) throw DomainError("config: prior_sigma must be > 0");
    if (!(learning_rate > 0.0)) throw DomainError("config: learning_rate must be > 0");
    if (!(kl_weight >= 0.0)) throw DomainError("config: kl_weight must be >= 0");
    if (!(aleatoric_bottleneck >= 0.0))
      throw DomainError("config: aleatoric_bottleneck must be >= 0");
    if (train_alpha && *train_alpha == 0.0)
      throw DomainError("config: train_alpha 0 is the variational objective; use \"vi\"");
    for (double a : alpha_grid)
      if (!std::isfinite(a)) throw DomainError("config: alpha grid entries must be finite");
    for (Method m : methods)
      if (m == Method::none) throw DomainError("config: 'none' is always evaluated; do not list it");
  }
};

namespace detail {

template <class T>
T get_checked(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(0, "config: key '" + key + "' has the wrong type");
  }
}

inline std::optional<double> alpha_from_json(const nlohmann::json& j, const std::string& key) {
  if (j.is_null() || (j.is_string() && j.get<std::string>() == "vi")) return std::nullopt;
  if (!j.is_number()) throw ParseError(0, "config: '" + key + "' must be a number or \"vi\"");
  return j.get<double>();
}

inline nlohmann::json alpha_to_json(std::optional<double> a) {
  return a ? nlohmann::json(*a) : nlohmann::json("vi");
}

inline void read_task(const nlohmann::json& j, SyntheticTask& t) {
  if (!j.is_object()) throw ParseError(0, "config: 'task' must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "function") t.function = get_checked<std::string>(v, key);
    else if (key == "input_dim") t.input_dim = get_checked<std::size_t>(v, key);
    else if (key == "output_dim") t.output_dim = get_checked<std::size_t>(v, key);
    else if (key == "input_range") t.input_range = get_checked<double>(v, key);
    else if (key == "noise_scale") t.noise_scale = get_checked<double>(v, key);
    else if (key == "noise_coupling") t.noise_coupling = get_checked<double>(v, key);
    else if (key == "seed") t.seed = get_checked<std::uint64_t>(v, key);
    else throw ParseError(0, "config: unknown key 'task." + key + "'");
  }
}

inline void read_fine_tune(const nlohmann::json& j, FineTuneSettings& f) {
  if (!j.is_object()) throw ParseError(0, "config: 'fine_tune' must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "steps") f.steps = get_checked<std::size_t>(v, key);
    else if (key == "learning_rate") f.learning_rate = get_checked<double>(v, key);
    else if (key == "k") f.k = get_checked<std::size_t>(v, key);
    else if (key == "patience") f.patience = get_checked<std::size_t>(v, key);
    else if (key == "eval_every") f.eval_every = get_checked<std::size_t>(v, key);
    else if (key == "batch_size") f.batch_size = get_checked<std::size_t>(v, key);
    else if (key == "kl_weight") f.kl_weight = get_checked<double>(v, key);
    else if (key == "select") {
      const auto s = get_checked<std::string>(v, key);
      if (s == "split_nll") f.select = FineTuneSelection::split_nll;
      else if (s == "objective") f.select = FineTuneSelection::objective;
      else throw ParseError(0, "config: fine_tune.select must be \"split_nll\" or \"objective\"");
    } else throw ParseError(0, "config: unknown key 'fine_tune." + key + "'");
  }
}

inline void read_trilts(const nlohmann::json& j, TrilFitSettings& f) {
  if (!j.is_object()) throw ParseError(0, "config: 'trilts' must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "max_iters") f.max_iters = get_checked<std::size_t>(v, key);
    else if (key == "learning_rate") f.learning_rate = get_checked<double>(v, key);
    else if (key == "tolerance") f.tolerance = get_checked<double>(v, key);
    else if (key == "window") f.window = get_checked<std::size_t>(v, key);
    else throw ParseError(0, "config: unknown key 'trilts." + key + "'");
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError(0, "config: top level must be an object");
  ExperimentConfig c;
  using detail::get_checked;
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") c.seed = get_checked<std::uint64_t>(v, key);
    else if (key == "task") detail::read_task(v, c.task);
    else if (key == "n_points") c.n_points = get_checked<std::size_t>(v, key);
    else if (key == "dataset") c.dataset = get_checked<std::string>(v, key);
    else if (key == "output_dir") c.output_dir = get_checked<std::string>(v, key);
    else if (key == "hidden") c.hidden = get_checked<std::vector<std::size_t>>(v, key);
    else if (key == "prior_sigma") c.prior_sigma = get_checked<double>(v, key);
    else if (key == "train_alpha") c.train_alpha = detail::alpha_from_json(v, key);
    else if (key == "k_train") c.k_train = get_checked<std::size_t>(v, key);
    else if (key == "k_eval") c.k_eval = get_checked<std::size_t>(v, key);
    else if (key == "k_val") c.k_val = get_checked<std::size_t>(v, key);
    else if (key == "epochs") c.epochs = get_checked<std::size_t>(v, key);
    else if (key == "batch_size") c.batch_size = get_checked<std::size_t>(v, key);
    else if (key == "learning_rate") c.learning_rate = get_checked<double>(v, key);
    else if (key == "kl_weight") c.kl_weight = get_checked<double>(v, key);
    else if (key == "kl_warmup_epochs") c.kl_warmup_epochs = get_checked<std::size_t>(v, key);
    else if (key == "aleatoric_bottleneck") c.aleatoric_bottleneck = get_checked<double>(v, key);
    else if (key == "methods") {
      c.methods.clear();
      for (const auto& s : get_checked<std::vector<std::string>>(v, key))
        c.methods.push_back(method_from_string(s));
    } else if (key == "alpha_grid") c.alpha_grid = get_checked<std::vector<double>>(v, key);
    else if (key == "fine_tune") detail::read_fine_tune(v, c.fine_tune);
    else if (key == "trilts") detail::read_trilts(v, c.trilts);
    else if (key == "threshold") {
      const auto s = get_checked<std::string>(v, key);
      if (s == "chi2") c.threshold = ThresholdMode::chi2;
      else if (s == "hotelling") c.threshold = ThresholdMode::hotelling;
      else throw ParseError(0, "config: threshold must be \"chi2\" or \"hotelling\"");
    } else if (key == "train_baselines") c.train_baselines = get_checked<bool>(v, key);
    else if (key == "threads") c.threads = get_checked<std::size_t>(v, key);
    else throw ParseError(0, "config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  std::vector<std::string> methods;
  for (Method m : c.methods) methods.push_back(to_string(m));
  return {{"seed", c.seed},
          {"task", task_to_json(c.task)},
          {"n_points", c.n_points},
          {"dataset", c.dataset},
          {"output_dir", c.output_dir},
          {"hidden", c.hidden},
          {"prior_sigma", c.prior_sigma},
          {"train_alpha", detail::alpha_to_json(c.train_alpha)},
          {"k_train", c.k_train},
          {"k_eval", c.k_eval},
          {"k_val", c.k_val},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"kl_weight", c.kl_weight},
          {"kl_warmup_epochs", c.kl_warmup_epochs},
          {"aleatoric_bottleneck", c.aleatoric_bottleneck},
          {"methods", methods},
          {"alpha_grid", c.alpha_grid},
          {"fine_tune",
           {{"steps", c.fine_tune.steps},
            {"learning_rate", c.fine_tune.learning_rate},
            {"k", c.fine_tune.k},
            {"patience", c.fine_tune.patience},
            {"eval_every", c.fine_tune.eval_every},
            {"batch_size", c.fine_tune.batch_size},
            {"kl_weight", c.fine_tune.kl_weight},
            {"select", c.fine_tune.select == FineTuneSelection::split_nll ? "split_nll" : "objective"}}},
          {"trilts",
           {{"max_iters", c.trilts.max_iters},
            {"learning_rate", c.trilts.learning_rate},
            {"tolerance", c.trilts.tolerance},
            {"window", c.trilts.window}}},
          {"threshold", c.threshold == ThresholdMode::chi2 ? "chi2" : "hotelling"},
          {"train_baselines", c.train_baselines},
          {"threads", c.threads}};
}

inline ExperimentConfig load_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace alphacal::harness

#endif  // ALPHACAL_HARNESS_CONFIG_HPP
