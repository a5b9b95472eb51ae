// Config-driven experiment harness: optimizer comparison grids, metric
// CSV/JSON emission, SVG curves, and the diagnostic probe (spectrum, subspace
// overlap, rank traces, residuals).
#pragma once

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "subcurve/curvature.hpp"
#include "subcurve/data.hpp"
#include "subcurve/diagnostics.hpp"
#include "subcurve/model.hpp"
#include "subcurve/optimizers.hpp"
#include "subcurve/plot.hpp"

namespace subcurve {

// ---------------------------------------------------------------------------
// Formatting helpers
// ---------------------------------------------------------------------------

/// Shortest decimal string that parses back to exactly the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

inline std::uint64_t fnv1a_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string method_name(Method m) {
  return m == Method::sgd ? "sgd" : "quasi_newton";
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& message) : std::runtime_error(message) {}
};

struct DatasetSpec {
  enum class Type { blobs, idx };
  Type type = Type::blobs;
  // blobs
  std::size_t classes = 4;
  std::size_t per_class = 40;
  std::size_t dim = 20;
  double mean_scale = 4.0;
  double sigma = 0.5;
  std::uint64_t seed = 1;
  // idx
  std::string images_path;
  std::string labels_path;

  Dataset build() const {
    if (type == Type::blobs)
      return generate_blobs(classes, per_class, dim, mean_scale, sigma, seed);
    return load_idx(images_path, labels_path);
  }
};

struct ProbeOptions {
  std::size_t top_n = 30;
  double rank_rel_tol = 1e-6;
  bool self_overlap_sanity = false;
  std::size_t log_every = 1;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  double holdout_fraction = 0.2;
  ModelSpec model;
  std::vector<Method> methods{Method::sgd, Method::quasi_newton};
  std::vector<double> etas{0.1};
  OptimizerConfig opt_base;  // eta/method overridden per cell
  std::size_t epochs = 100;
  std::vector<std::size_t> batch_sizes{32};
  std::vector<std::uint64_t> seeds{1};
  std::string out_dir = "out";
  ProbeOptions probe;

  nlohmann::json to_json() const;
  std::string semantic_hash() const;
  void validate() const;
};

namespace detail {

inline void expect_field(const nlohmann::json& j, const std::string& key,
                         const std::string& where) {
  if (!j.contains(key))
    throw ConfigError(where + ": missing required field \"" + key + "\"");
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::expect_field(j, "dataset", "config");
  const auto& dj = j.at("dataset");
  const std::string type = detail::get_or<std::string>(dj, "type", "blobs");
  if (type == "blobs") {
    cfg.dataset.type = DatasetSpec::Type::blobs;
    cfg.dataset.classes = detail::get_or<std::size_t>(dj, "classes", 4);
    cfg.dataset.per_class = detail::get_or<std::size_t>(dj, "per_class", 40);
    cfg.dataset.dim = detail::get_or<std::size_t>(dj, "dim", 20);
    cfg.dataset.mean_scale = detail::get_or<double>(dj, "mean_scale", 4.0);
    cfg.dataset.sigma = detail::get_or<double>(dj, "sigma", 0.5);
    cfg.dataset.seed = detail::get_or<std::uint64_t>(dj, "seed", 1);
  } else if (type == "idx") {
    cfg.dataset.type = DatasetSpec::Type::idx;
    detail::expect_field(dj, "images", "config.dataset");
    detail::expect_field(dj, "labels", "config.dataset");
    cfg.dataset.images_path = dj.at("images").get<std::string>();
    cfg.dataset.labels_path = dj.at("labels").get<std::string>();
  } else {
    throw ConfigError("config.dataset.type: unknown type \"" + type + "\"");
  }
  cfg.holdout_fraction = detail::get_or<double>(j, "holdout_fraction", 0.2);

  detail::expect_field(j, "model", "config");
  const auto& mj = j.at("model");
  detail::expect_field(mj, "widths", "config.model");
  cfg.model.layer_widths = mj.at("widths").get<std::vector<std::size_t>>();
  const std::string act = detail::get_or<std::string>(mj, "activation", "relu");
  if (act == "relu")
    cfg.model.activation = Activation::relu;
  else if (act == "identity")
    cfg.model.activation = Activation::identity;
  else
    throw ConfigError("config.model.activation: unknown activation \"" + act + "\"");

  if (j.contains("optimizer")) {
    const auto& oj = j.at("optimizer");
    if (oj.contains("methods")) {
      cfg.methods.clear();
      for (const auto& m : oj.at("methods")) {
        const std::string name = m.get<std::string>();
        if (name == "sgd")
          cfg.methods.push_back(Method::sgd);
        else if (name == "quasi_newton")
          cfg.methods.push_back(Method::quasi_newton);
        else
          throw ConfigError("config.optimizer.methods: unknown method \"" + name + "\"");
      }
    }
    if (oj.contains("etas")) cfg.etas = oj.at("etas").get<std::vector<double>>();
    cfg.opt_base.momentum_beta = detail::get_or<double>(oj, "momentum_beta", 0.9);
    cfg.opt_base.gamma = detail::get_or<double>(oj, "gamma", 0.9);
    cfg.opt_base.weight_decay = detail::get_or<double>(oj, "weight_decay", 0.0);
    cfg.opt_base.orthonormalize = detail::get_or<bool>(oj, "orthonormalize", false);
    cfg.opt_base.lambda_floor = detail::get_or<double>(oj, "lambda_floor", 1e-8);
    const std::string mode = detail::get_or<std::string>(oj, "momentum_applies_to",
                                                         "combined_update");
    if (mode == "combined_update")
      cfg.opt_base.momentum_applies_to = MomentumMode::combined_update;
    else if (mode == "projected_only")
      cfg.opt_base.momentum_applies_to = MomentumMode::projected_only;
    else
      throw ConfigError("config.optimizer.momentum_applies_to: unknown mode \"" +
                        mode + "\"");
    if (oj.contains("max_newton_step") && !oj.at("max_newton_step").is_null())
      cfg.opt_base.max_newton_step = oj.at("max_newton_step").get<double>();
  }

  cfg.epochs = detail::get_or<std::size_t>(j, "epochs", 100);
  if (j.contains("batch_sizes"))
    cfg.batch_sizes = j.at("batch_sizes").get<std::vector<std::size_t>>();
  if (j.contains("seeds"))
    cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  cfg.out_dir = detail::get_or<std::string>(j, "out_dir", "out");

  if (j.contains("probe")) {
    const auto& pj = j.at("probe");
    cfg.probe.top_n = detail::get_or<std::size_t>(pj, "top_n", 30);
    cfg.probe.rank_rel_tol = detail::get_or<double>(pj, "rank_rel_tol", 1e-6);
    cfg.probe.self_overlap_sanity =
        detail::get_or<bool>(pj, "self_overlap_sanity", false);
    cfg.probe.log_every = detail::get_or<std::size_t>(pj, "log_every", 1);
  }
  return cfg;
}

inline nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  if (dataset.type == DatasetSpec::Type::blobs) {
    j["dataset"] = {{"type", "blobs"},         {"classes", dataset.classes},
                    {"per_class", dataset.per_class}, {"dim", dataset.dim},
                    {"mean_scale", dataset.mean_scale}, {"sigma", dataset.sigma},
                    {"seed", dataset.seed}};
  } else {
    j["dataset"] = {{"type", "idx"},
                    {"images", dataset.images_path},
                    {"labels", dataset.labels_path}};
  }
  j["holdout_fraction"] = holdout_fraction;
  j["model"] = {
      {"widths", model.layer_widths},
      {"activation", model.activation == Activation::relu ? "relu" : "identity"}};
  nlohmann::json methods_json = nlohmann::json::array();
  for (Method m : methods) methods_json.push_back(method_name(m));
  j["optimizer"] = {
      {"methods", methods_json},
      {"etas", etas},
      {"momentum_beta", opt_base.momentum_beta},
      {"gamma", opt_base.gamma},
      {"weight_decay", opt_base.weight_decay},
      {"orthonormalize", opt_base.orthonormalize},
      {"lambda_floor", opt_base.lambda_floor},
      {"momentum_applies_to",
       opt_base.momentum_applies_to == MomentumMode::combined_update
           ? "combined_update"
           : "projected_only"}};
  if (std::isfinite(opt_base.max_newton_step))
    j["optimizer"]["max_newton_step"] = opt_base.max_newton_step;
  else
    j["optimizer"]["max_newton_step"] = nullptr;
  j["epochs"] = epochs;
  j["batch_sizes"] = batch_sizes;
  j["seeds"] = seeds;
  j["out_dir"] = out_dir;
  j["probe"] = {{"top_n", probe.top_n},
                {"rank_rel_tol", probe.rank_rel_tol},
                {"self_overlap_sanity", probe.self_overlap_sanity},
                {"log_every", probe.log_every}};
  return j;
}

/// Hash over the canonicalized config with non-semantic fields (output
/// location) removed; stable across field ordering in the source file.
inline std::string ExperimentConfig::semantic_hash() const {
  nlohmann::json j = to_json();
  j.erase("out_dir");
  return to_hex(fnv1a_hash(j.dump()));
}

inline void ExperimentConfig::validate() const {
  model.validate();
  if (seeds.empty()) throw ConfigError("config.seeds: need at least one seed");
  if (etas.empty()) throw ConfigError("config.optimizer.etas: need at least one eta");
  if (methods.empty())
    throw ConfigError("config.optimizer.methods: need at least one method");
  if (batch_sizes.empty())
    throw ConfigError("config.batch_sizes: need at least one batch size");
  for (std::size_t b : batch_sizes)
    if (b == 0) throw ConfigError("config.batch_sizes: batch size must be >= 1");
  for (double e : etas)
    if (!(e > 0.0)) throw ConfigError("config.optimizer.etas: eta must be > 0");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
    throw ConfigError("config.holdout_fraction: must be in [0,1)");
  if (epochs == 0) throw ConfigError("config.epochs: must be >= 1");
  if (dataset.type == DatasetSpec::Type::idx) {
    if (!std::filesystem::exists(dataset.images_path))
      throw ConfigError("config.dataset.images: no such file " + dataset.images_path);
    if (!std::filesystem::exists(dataset.labels_path))
      throw ConfigError("config.dataset.labels: no such file " + dataset.labels_path);
  }
  if (dataset.type == DatasetSpec::Type::blobs &&
      model.layer_widths.back() != dataset.classes)
    throw ConfigError("config.model.widths: final width " +
                      std::to_string(model.layer_widths.back()) +
                      " must equal the class count " +
                      std::to_string(dataset.classes));
  OptimizerConfig probe_cfg = opt_base;
  probe_cfg.eta = etas.front();
  probe_cfg.validate();
}

/// Parses a config file; JSON syntax errors are reported with their line.
inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1;
    const std::size_t limit = std::min<std::size_t>(e.byte, text.size());
    for (std::size_t i = 0; i < limit; ++i)
      if (text[i] == '\n') ++line;
    throw ConfigError(path + ":" + std::to_string(line) + ": " + e.what());
  }
  try {
    ExperimentConfig cfg = config_from_json(j);
    cfg.validate();
    return cfg;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Grid runner
// ---------------------------------------------------------------------------

struct Cell {
  Method method;
  double eta;
  std::size_t batch_size;
  std::uint64_t seed;

  std::string label() const {
    return method_name(method) + "_eta" + format_double(eta) + "_b" +
           std::to_string(batch_size) + "_seed" + std::to_string(seed);
  }
};

inline std::vector<Cell> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> cells;
  for (Method m : cfg.methods)
    for (double eta : cfg.etas)
      for (std::size_t b : cfg.batch_sizes)
        for (std::uint64_t s : cfg.seeds) cells.push_back({m, eta, b, s});
  return cells;
}

struct CellResult {
  Cell cell;
  RunOutcome outcome = RunOutcome::completed;
  std::string message;
  std::size_t epochs_run = 0;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_accuracy = std::numeric_limits<double>::quiet_NaN();
  double final_val_loss = std::numeric_limits<double>::quiet_NaN();
  double final_val_accuracy = std::numeric_limits<double>::quiet_NaN();
  double wall_time_s = 0.0;
  std::vector<std::string> csv_rows;
  Series train_loss_series;
  Series val_loss_series;
};

namespace detail {

inline std::string csv_row(const Cell& cell, std::size_t epoch, std::uint64_t step,
                           const std::string& split, double loss, double accuracy) {
  return method_name(cell.method) + "," + format_double(cell.eta) + "," +
         std::to_string(cell.batch_size) + "," + std::to_string(cell.seed) + "," +
         std::to_string(epoch) + "," + std::to_string(step) + "," + split + "," +
         format_double(loss) + "," + format_double(accuracy);
}

}  // namespace detail

inline CellResult run_cell(const ExperimentConfig& cfg, const Dataset& train,
                           const Dataset& val, const Cell& cell) {
  const auto t0 = std::chrono::steady_clock::now();
  CellResult result;
  result.cell = cell;
  result.train_loss_series = {"train loss", {}, "#1f6feb"};
  result.val_loss_series = {"validation loss", {}, "#d73a49"};

  OptimizerConfig opt = cfg.opt_base;
  opt.method = cell.method;
  opt.eta = cell.eta;
  TrainState state = TrainState::init(cfg.model, cell.seed, opt);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const EpochResult er = train_epoch(cfg.model, train, opt, cell.batch_size,
                                       state, derive_seed(cell.seed, epoch));
    for (const StepMetrics& m : er.metrics) {
      result.csv_rows.push_back(detail::csv_row(cell, epoch, m.step, "train",
                                                m.mean_loss, m.train_accuracy));
      result.train_loss_series.points.emplace_back(static_cast<double>(m.step),
                                                   m.mean_loss);
      result.final_train_loss = m.mean_loss;
      result.final_train_accuracy = m.train_accuracy;
    }
    if (er.outcome == RunOutcome::diverged) {
      result.outcome = RunOutcome::diverged;
      result.message = er.message;
      result.epochs_run = epoch + 1;
      break;
    }
    if (val.size() > 0) {
      const auto vb = minibatch_stream(val, val.size(), 0);
      const BatchForward fb = forward_batch(cfg.model, state.params,
                                            gather_inputs(val, vb[0]), vb[0].one_hot);
      result.final_val_loss = fb.mean_loss;
      result.final_val_accuracy = batch_accuracy(fb);
      result.csv_rows.push_back(detail::csv_row(cell, epoch, state.steps_done,
                                                "validation", fb.mean_loss,
                                                batch_accuracy(fb)));
      result.val_loss_series.points.emplace_back(
          static_cast<double>(state.steps_done), fb.mean_loss);
    }
    result.epochs_run = epoch + 1;
  }
  if (result.outcome == RunOutcome::completed) {
    // final numbers come from a full pass over the training set, not the
    // last minibatch
    const auto tb = minibatch_stream(train, train.size(), 0);
    const BatchForward fb = forward_batch(cfg.model, state.params,
                                          gather_inputs(train, tb[0]), tb[0].one_hot);
    result.final_train_loss = fb.mean_loss;
    result.final_train_accuracy = batch_accuracy(fb);
  }
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

constexpr char kMetricsHeader[] =
    "method,eta,batch_size,seed,epoch,step,split,loss,accuracy";

/// Executes every (method, eta, batch_size, seed) cell, optionally with a
/// worker pool, then merges per-cell buffers in deterministic grid order.
/// Returns 0 when every cell completed, 2 when any diverged.
inline int run_experiment(const ExperimentConfig& cfg, std::size_t jobs,
                          std::ostream& log) {
  cfg.validate();
  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir / "plots");

  {
    std::ofstream resolved(out_dir / "config.resolved.json", std::ios::trunc);
    resolved << cfg.to_json().dump(2) << "\n";
  }

  const Dataset full = cfg.dataset.build();
  if (full.class_count != cfg.model.layer_widths.back())
    throw ConfigError("model output width " +
                      std::to_string(cfg.model.layer_widths.back()) +
                      " does not match dataset class count " +
                      std::to_string(full.class_count));
  const auto [train, val] = split_holdout(full, cfg.holdout_fraction, 0xD5u ^ full.size());

  const std::vector<Cell> cells = enumerate_cells(cfg);
  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= cells.size()) return;
        results[i] = run_cell(cfg, train, val, cells[i]);
      }
    });
  }
  for (auto& t : pool) t.join();

  // deterministic merge in grid order
  std::ofstream csv(out_dir / "metrics.csv", std::ios::trunc);
  csv << kMetricsHeader << "\n";
  for (const CellResult& r : results)
    for (const std::string& row : r.csv_rows) csv << row << "\n";
  csv.close();

  bool any_diverged = false;
  nlohmann::json summary;
  summary["schema"] = "run-v1";
  summary["config_hash"] = cfg.semantic_hash();
  summary["cells"] = nlohmann::json::array();
  for (const CellResult& r : results) {
    any_diverged |= r.outcome == RunOutcome::diverged;
    nlohmann::json c;
    c["method"] = method_name(r.cell.method);
    c["eta"] = r.cell.eta;
    c["batch_size"] = r.cell.batch_size;
    c["seed"] = r.cell.seed;
    c["outcome"] = r.outcome == RunOutcome::completed ? "completed" : "diverged";
    if (!r.message.empty()) c["message"] = r.message;
    c["epochs_run"] = r.epochs_run;
    c["final_train_loss"] = r.final_train_loss;
    c["final_train_accuracy"] = r.final_train_accuracy;
    if (val.size() > 0) {
      c["final_val_loss"] = r.final_val_loss;
      c["final_val_accuracy"] = r.final_val_accuracy;
    }
    c["wall_time_s"] = r.wall_time_s;
    summary["cells"].push_back(c);

    write_line_chart((out_dir / "plots" / (r.cell.label() + ".svg")).string(),
                     r.cell.label(), "step", "loss",
                     {r.train_loss_series, r.val_loss_series}, true);
    log << "cell " << r.cell.label() << ": "
        << (r.outcome == RunOutcome::completed ? "completed" : "diverged")
        << " (train loss " << format_double(r.final_train_loss) << ")\n";
  }
  std::ofstream summary_out(out_dir / "summary.json", std::ios::trunc);
  summary_out << summary.dump(2) << "\n";

  return any_diverged ? 2 : 0;
}

// ---------------------------------------------------------------------------
// Comparison tables
// ---------------------------------------------------------------------------

// Published ResNet9/CIFAR-10 baseline, shown next to local results for
// orientation only; nothing asserts against these numbers.
struct ReferenceRow {
  double eta;
  double sgd_accuracy, qn_accuracy;  // percent
  double sgd_loss, qn_loss;
};
inline const std::vector<ReferenceRow>& resnet9_cifar10_reference() {
  static const std::vector<ReferenceRow> rows = {
      {1e-1, 88.0, 92.0, 0.3574, 0.3304},
      {5e-2, 87.0, 92.0, 0.3985, 0.3346},
      {1e-2, 82.0, 90.0, 0.5362, 0.3411},
  };
  return rows;
}

struct CompareCellFinal {
  double loss = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Aggregates final metrics per (eta, method) across seeds from metrics CSV
/// files and prints an aligned table plus JSON. Returns 1 when a method has
/// no rows ("incomplete grid").
inline int compare_metrics(const std::vector<std::string>& csv_paths,
                           const std::string& json_out_path, std::ostream& out) {
  // cell key: method,eta,batch,seed -> last row per split
  std::map<std::string, std::map<std::string, CompareCellFinal>> finals;
  std::map<std::string, std::pair<std::string, double>> cell_meta;  // method, eta
  for (const std::string& path : csv_paths) {
    std::ifstream in(path);
    if (!in) {
      out << "compare: cannot open " << path << "\n";
      return 1;
    }
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
      out << "compare: " << path << " has an unexpected header\n";
      return 1;
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> fields;
      std::stringstream ss(line);
      std::string field;
      while (std::getline(ss, field, ',')) fields.push_back(field);
      if (fields.size() != 9) {
        out << "compare: malformed row in " << path << ": " << line << "\n";
        return 1;
      }
      const std::string key = fields[0] + "," + fields[1] + "," + fields[2] + "," + fields[3];
      cell_meta[key] = {fields[0], std::strtod(fields[1].c_str(), nullptr)};
      CompareCellFinal f;
      f.loss = std::strtod(fields[7].c_str(), nullptr);
      f.accuracy = std::strtod(fields[8].c_str(), nullptr);
      finals[key][fields[6]] = f;  // later rows overwrite: keeps the final one
    }
  }
  if (finals.empty()) {
    out << "compare: no metric rows found\n";
    return 1;
  }

  // group by (eta, method); prefer the validation split
  std::map<double, std::map<std::string, std::vector<CompareCellFinal>>> grid;
  for (const auto& [key, splits] : finals) {
    const auto& [method, eta] = cell_meta.at(key);
    const auto it = splits.count("validation") ? splits.find("validation")
                                               : splits.find("train");
    if (it != splits.end()) grid[eta][method].push_back(it->second);
  }
  std::vector<std::string> methods_present;
  for (const auto& [eta, per_method] : grid)
    for (const auto& [m, v] : per_method)
      if (std::find(methods_present.begin(), methods_present.end(), m) ==
          methods_present.end())
        methods_present.push_back(m);
  for (const auto& [eta, per_method] : grid)
    for (const std::string& m : methods_present)
      if (!per_method.count(m)) {
        out << "compare: incomplete grid: eta " << format_double(eta)
            << " missing method " << m << "\n";
        return 1;
      }

  const auto mean_std = [](const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var = xs.size() > 1 ? var / static_cast<double>(xs.size() - 1) : 0.0;
    return std::make_pair(mean, std::sqrt(var));
  };

  nlohmann::json j;
  j["schema"] = "compare-v1";
  j["rows"] = nlohmann::json::array();
  char buf[256];
  out << "final metrics across seeds (accuracy %, loss):\n";
  std::snprintf(buf, sizeof(buf), "%-10s", "eta");
  out << buf;
  for (const auto& m : methods_present) {
    std::snprintf(buf, sizeof(buf), " | %-24s", m.c_str());
    out << buf;
  }
  out << "\n";
  for (const auto& [eta, per_method] : grid) {
    std::snprintf(buf, sizeof(buf), "%-10s", format_double(eta).c_str());
    out << buf;
    for (const auto& m : methods_present) {
      std::vector<double> accs, losses;
      for (const auto& f : per_method.at(m)) {
        accs.push_back(f.accuracy * 100.0);
        losses.push_back(f.loss);
      }
      const auto [am, as] = mean_std(accs);
      const auto [lm, ls] = mean_std(losses);
      std::snprintf(buf, sizeof(buf), " | %5.1f±%-4.1f %.4f±%.4f", am, as, lm, ls);
      out << buf;
      nlohmann::json row;
      row["eta"] = eta;
      row["method"] = m;
      row["accuracy_mean"] = am;
      row["accuracy_std"] = as;
      row["loss_mean"] = lm;
      row["loss_std"] = ls;
      row["seeds"] = per_method.at(m).size();
      j["rows"].push_back(row);
    }
    out << "\n";
  }

  out << "\nreference (published ResNet9/CIFAR-10 baseline; display only):\n";
  out << "eta        | sgd acc%  qn acc%  | sgd loss  qn loss\n";
  nlohmann::json ref = nlohmann::json::array();
  for (const ReferenceRow& r : resnet9_cifar10_reference()) {
    std::snprintf(buf, sizeof(buf), "%-10s | %7.1f  %7.1f  | %.4f    %.4f\n",
                  format_double(r.eta).c_str(), r.sgd_accuracy, r.qn_accuracy,
                  r.sgd_loss, r.qn_loss);
    out << buf;
    ref.push_back({{"eta", r.eta},
                   {"sgd_accuracy", r.sgd_accuracy},
                   {"qn_accuracy", r.qn_accuracy},
                   {"sgd_loss", r.sgd_loss},
                   {"qn_loss", r.qn_loss}});
  }
  j["reference_resnet9_cifar10"] = ref;

  if (!json_out_path.empty()) {
    std::ofstream jout(json_out_path, std::ios::trunc);
    jout << j.dump(2) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Diagnostic probe
// ---------------------------------------------------------------------------

/// Trains the first grid cell while snapshotting per-batch class-gradient
/// directions, then reports the spectrum, subspace overlap, per-batch rank
/// trace, residual stats and low-rank error against the trained model.
/// Writes diag-v1 JSON plus spectrum / rank SVGs. Returns 0 on success.
inline int run_probe(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);

  const Dataset full = cfg.dataset.build();
  const auto [train, val] = split_holdout(full, cfg.holdout_fraction, 0xD5u ^ full.size());
  const std::size_t classes = train.class_count;

  OptimizerConfig opt = cfg.opt_base;
  opt.method = cfg.methods.front();
  opt.eta = cfg.etas.front();
  const Cell cell{opt.method, opt.eta, cfg.batch_sizes.front(), cfg.seeds.front()};
  TrainState state = TrainState::init(cfg.model, cell.seed, opt);

  // per-step snapshots of normalized batch class gradients (observed classes)
  struct Snapshot {
    std::uint64_t step;
    std::vector<Vector> directions;
  };
  std::vector<Snapshot> snapshots;
  RunOutcome outcome = RunOutcome::completed;
  std::string outcome_message;

  for (std::size_t epoch = 0; epoch < cfg.epochs && outcome == RunOutcome::completed;
       ++epoch) {
    const auto batches =
        minibatch_stream(train, cell.batch_size, derive_seed(cell.seed, epoch));
    for (const Minibatch& batch : batches) {
      try {
        const Tensor inputs = gather_inputs(train, batch);
        const BatchForward fb =
            forward_batch(cfg.model, state.params, inputs, batch.one_hot);
        const ParamVector grad =
            loss_gradient(cfg.model, state.params, inputs, batch.one_hot);
        const auto logit_grads = batch_logit_gradients(cfg.model, state.params, inputs);
        const auto class_grads = batch_class_gradients(fb, logit_grads, batch);
        std::vector<double> c_norm_sq(classes, 0.0);
        for (std::size_t k = 0; k < classes; ++k)
          if (class_grads[k]) c_norm_sq[k] = norm_sq(*class_grads[k]);
        const auto lambdas = batch_eigenvalues(fb, c_norm_sq);
        state.curvature = update_state(std::move(state.curvature), class_grads, lambdas);

        if (state.steps_done % cfg.probe.log_every == 0) {
          Snapshot snap;
          snap.step = state.steps_done;
          for (std::size_t k = 0; k < classes; ++k)
            if (class_grads[k] && norm(*class_grads[k]) > 1e-12) {
              Vector v = *class_grads[k];
              scale(v, 1.0 / norm(v));
              snap.directions.push_back(std::move(v));
            }
          snapshots.push_back(std::move(snap));
        }

        if (opt.method == Method::quasi_newton) {
          const LowRankHessian h =
              build_low_rank(state.curvature, opt.orthonormalize, opt.lambda_floor);
          qn_step(state.params, grad, h, state.momentum, opt);
        } else {
          sgd_step(state.params, grad, state.momentum, opt);
        }
        ++state.steps_done;
        if (norm(state.params) > kDivergenceParamNorm)
          throw StepError("parameter norm diverged");
      } catch (const std::runtime_error& e) {
        outcome = RunOutcome::diverged;
        outcome_message = e.what();
        break;
      }
    }
  }

  // final dense analysis on the full training set
  const auto all_batches = minibatch_stream(train, train.size(), 0);
  const Tensor all_inputs = gather_inputs(train, all_batches[0]);
  const Tensor all_onehot = all_batches[0].one_hot;
  const DenseMatrix gn =
      gauss_newton_hessian(cfg.model, state.params, all_inputs, all_onehot);
  const EigenSystem gn_eig = sym_eig(gn);

  std::vector<Vector> ema_grads(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    if (!state.curvature.observed(k))
      throw std::runtime_error("probe: class " + std::to_string(k) +
                               " never observed during training");
    ema_grads[k] = state.curvature.class_gradient_estimate(k);
  }

  EigenSystem eig = gn_eig;
  std::vector<Vector> overlap_grads = ema_grads;
  if (cfg.probe.self_overlap_sanity) {
    // identity check: compare the orthonormalized class gradients against
    // themselves; the assignment score must come out 1 and the rank C
    const auto basis = gram_schmidt(ema_grads, 1e-12);
    eig.eigenvectors = basis;
    eig.eigenvalues.assign(basis.size(), 1.0);
    overlap_grads = basis;
  }

  OverlapReport overlap =
      subspace_overlap(overlap_grads, eig, cfg.probe.rank_rel_tol);

  // rank-per-batch trace against the final top-C eigenvectors
  nlohmann::json sigma_trace = nlohmann::json::array();
  for (const auto& snap : snapshots) {
    std::vector<Vector> combined = snap.directions;
    for (std::size_t j = 0; j < std::min(classes, eig.eigenvectors.size()); ++j)
      combined.push_back(eig.eigenvectors[j]);
    const DenseMatrix m = DenseMatrix::from_columns(combined);
    overlap.rank_per_batch.push_back(numerical_rank(m, cfg.probe.rank_rel_tol));
    const auto sigma = singular_values(m);
    const auto sigma_at = [&](std::size_t i) {
      return i < sigma.size() ? sigma[i] : 0.0;
    };
    sigma_trace.push_back({{"step", snap.step},
                           {"sigma_C", sigma_at(classes - 1)},
                           {"sigma_C_plus_1", sigma_at(classes)},
                           {"sigma_2C", sigma_at(2 * classes - 1)}});
  }

  // residuals of the logit decomposition over the full training set, with
  // c_k as that set's per-class means
  const auto full_logit_grads =
      batch_logit_gradients(cfg.model, state.params, all_inputs);
  std::vector<Vector> full_class_means(classes, Vector(state.params.size(), 0.0));
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t mu = 0; mu < train.size(); ++mu) {
    const std::size_t k = train.labels[all_batches[0].indices[mu]];
    axpy(1.0, full_logit_grads[mu][k], full_class_means[k]);
    ++counts[k];
  }
  std::vector<std::size_t> batch_labels(train.size());
  for (std::size_t mu = 0; mu < train.size(); ++mu)
    batch_labels[mu] = train.labels[all_batches[0].indices[mu]];
  for (std::size_t k = 0; k < classes; ++k)
    scale(full_class_means[k], 1.0 / static_cast<double>(counts[k]));
  overlap.residual_stats =
      logit_residuals(full_logit_grads, batch_labels, full_class_means);

  const LowRankHessian h =
      build_low_rank(state.curvature, opt.orthonormalize, opt.lambda_floor);
  const LowRankErrorReport lr = low_rank_error_dense(gn, classes, h);
  SpectrumReport spectrum;
  const std::size_t keep = std::min(cfg.probe.top_n, gn_eig.eigenvalues.size());
  spectrum.eigenvalues.assign(
      gn_eig.eigenvalues.begin(),
      gn_eig.eigenvalues.begin() + static_cast<std::ptrdiff_t>(keep));
  if (classes >= 1 && classes < gn_eig.eigenvalues.size()) {
    const double next = gn_eig.eigenvalues[classes];
    spectrum.gap_ratio = next <= 0.0 ? std::numeric_limits<double>::infinity()
                                     : gn_eig.eigenvalues[classes - 1] / next;
  }

  nlohmann::json j;
  j["schema"] = "diag-v1";
  j["config_hash"] = cfg.semantic_hash();
  j["cell"] = {{"method", method_name(cell.method)},
               {"eta", cell.eta},
               {"batch_size", cell.batch_size},
               {"seed", cell.seed},
               {"outcome", outcome == RunOutcome::completed ? "completed" : "diverged"}};
  if (!outcome_message.empty()) j["cell"]["message"] = outcome_message;
  j["spectrum"] = {{"eigenvalues", spectrum.eigenvalues}};
  if (std::isfinite(spectrum.gap_ratio))
    j["spectrum"]["gap_ratio"] = spectrum.gap_ratio;
  else
    j["spectrum"]["gap_ratio"] = nullptr;
  std::vector<std::vector<double>> cosine(classes, std::vector<double>(classes));
  for (std::size_t a = 0; a < classes; ++a)
    for (std::size_t b = 0; b < classes; ++b) cosine[a][b] = overlap.cosine_matrix(a, b);
  j["overlap"] = {{"cosine_matrix", cosine},
                  {"assignment", overlap.assignment},
                  {"assignment_score", overlap.assignment_score},
                  {"combined_rank", overlap.combined_rank}};
  j["rank_per_batch"] = overlap.rank_per_batch;
  j["sigma_trace"] = sigma_trace;
  nlohmann::json residuals = nlohmann::json::array();
  for (const auto& r : overlap.residual_stats)
    residuals.push_back({{"class", r.class_id},
                         {"count", r.count},
                         {"mean_rel", r.mean_rel},
                         {"max_rel", r.max_rel},
                         {"mean_residual_norm", r.mean_residual_norm}});
  j["residuals"] = residuals;
  j["low_rank"] = {{"frobenius_rel_error", lr.frobenius_rel_error},
                   {"top_subspace_angle", lr.top_subspace_angle}};
  j["max_cross_dot"] = h.max_cross_dot;

  std::ofstream jout(out_dir / "diagnostics.json", std::ios::trunc);
  jout << j.dump(2) << "\n";

  Series spec_series{"gauss-newton spectrum", {}, "#1f6feb"};
  for (std::size_t i = 0; i < spectrum.eigenvalues.size(); ++i)
    spec_series.points.emplace_back(static_cast<double>(i + 1),
                                    spectrum.eigenvalues[i]);
  write_line_chart((out_dir / "spectrum.svg").string(), "top eigenvalues",
                   "index", "eigenvalue", {spec_series}, true);
  Series rank_series{"combined rank", {}, "#d73a49"};
  for (std::size_t i = 0; i < overlap.rank_per_batch.size(); ++i)
    rank_series.points.emplace_back(static_cast<double>(snapshots[i].step),
                                    static_cast<double>(overlap.rank_per_batch[i]));
  write_line_chart((out_dir / "rank_per_batch.svg").string(),
                   "rank of [class grads | top-C eigenvectors]", "step", "rank",
                   {rank_series}, false);

  log << "probe: assignment score " << format_double(overlap.assignment_score)
      << ", combined rank " << overlap.combined_rank << ", low-rank rel error "
      << format_double(lr.frobenius_rel_error) << "\n";
  return 0;
}

/// Trains the first grid cell, then reports the Gauss-Newton spectrum on the
/// training set (JSON + SVG).
inline int run_spectrum(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);

  const Dataset full = cfg.dataset.build();
  const auto [train, val] = split_holdout(full, cfg.holdout_fraction, 0xD5u ^ full.size());
  OptimizerConfig opt = cfg.opt_base;
  opt.method = cfg.methods.front();
  opt.eta = cfg.etas.front();
  const Cell cell{opt.method, opt.eta, cfg.batch_sizes.front(), cfg.seeds.front()};
  TrainState state = TrainState::init(cfg.model, cell.seed, opt);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto er = train_epoch(cfg.model, train, opt, cell.batch_size, state,
                                derive_seed(cell.seed, epoch));
    if (er.outcome == RunOutcome::diverged) {
      log << "spectrum: training diverged (" << er.message
          << "); reporting at the last finite parameters\n";
      break;
    }
  }
  const auto batches = minibatch_stream(train, train.size(), 0);
  const auto report =
      eigenspectrum_report(cfg.model, state.params, gather_inputs(train, batches[0]),
                           batches[0].one_hot, cfg.probe.top_n);
  nlohmann::json j;
  j["schema"] = "diag-v1";
  j["config_hash"] = cfg.semantic_hash();
  j["spectrum"] = {{"eigenvalues", report.eigenvalues}};
  if (std::isfinite(report.gap_ratio))
    j["spectrum"]["gap_ratio"] = report.gap_ratio;
  else
    j["spectrum"]["gap_ratio"] = nullptr;
  std::ofstream jout(out_dir / "spectrum.json", std::ios::trunc);
  jout << j.dump(2) << "\n";

  Series s{"gauss-newton spectrum", {}, "#1f6feb"};
  for (std::size_t i = 0; i < report.eigenvalues.size(); ++i)
    s.points.emplace_back(static_cast<double>(i + 1), report.eigenvalues[i]);
  write_line_chart((out_dir / "spectrum.svg").string(), "top eigenvalues", "index",
                   "eigenvalue", {s}, true);
  log << "spectrum: " << report.eigenvalues.size() << " eigenvalues written\n";
  return 0;
}

}  // namespace subcurve
