// subcurve CLI: run optimizer comparison grids, aggregate metrics, and emit
// curvature diagnostics.
//
//   subcurve run <config.json>       train every grid cell, write metrics
//   subcurve compare <csv...>        mean +/- std table across seeds
//   subcurve probe <config.json>     subspace-overlap and residual reports
//   subcurve spectrum <config.json>  Gauss-Newton eigenspectrum report
//
// Exit codes: 0 success, 1 invalid config/input, 2 at least one cell diverged.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "subcurve/experiment.hpp"

namespace {

// --out beats SUBCURVE_OUT beats the config's out_dir.
void apply_out_dir(subcurve::ExperimentConfig& cfg, const std::string& out_flag) {
  if (!out_flag.empty()) {
    cfg.out_dir = out_flag;
    return;
  }
  if (const char* env = std::getenv("SUBCURVE_OUT")) {
    if (*env) cfg.out_dir = env;
  }
}

void apply_seed_count(subcurve::ExperimentConfig& cfg, unsigned seed_count) {
  if (seed_count == 0) return;
  cfg.seeds.clear();
  for (unsigned s = 1; s <= seed_count; ++s) cfg.seeds.push_back(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"low-rank quasi-Newton optimizer experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, compare_json;
  unsigned seed_count = 0;
  unsigned jobs = 1;
  std::vector<std::string> csv_paths;

  auto* run_cmd = app.add_subcommand("run", "train every (method, eta, batch, seed) cell");
  run_cmd->add_option("config", config_path, "experiment config JSON")->required();
  run_cmd->add_option("--out", out_dir, "output directory");
  run_cmd->add_option("--seeds", seed_count, "replace config seeds with 1..N");
  run_cmd->add_option("--jobs", jobs, "concurrent grid cells")->default_val(1);

  auto* compare_cmd = app.add_subcommand("compare", "aggregate metrics CSVs across seeds");
  compare_cmd->add_option("csv", csv_paths, "metrics.csv files")->required();
  compare_cmd->add_option("--out", compare_json, "write the table as JSON here");

  auto* probe_cmd = app.add_subcommand("probe", "curvature diagnostics after training");
  probe_cmd->add_option("config", config_path, "experiment config JSON")->required();
  probe_cmd->add_option("--out", out_dir, "output directory");
  probe_cmd->add_option("--seeds", seed_count, "replace config seeds with 1..N");

  auto* spectrum_cmd = app.add_subcommand("spectrum", "Gauss-Newton eigenspectrum report");
  spectrum_cmd->add_option("config", config_path, "experiment config JSON")->required();
  spectrum_cmd->add_option("--out", out_dir, "output directory");
  spectrum_cmd->add_option("--seeds", seed_count, "replace config seeds with 1..N");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(compare_cmd))
      return subcurve::compare_metrics(csv_paths, compare_json, std::cout);

    subcurve::ExperimentConfig cfg = subcurve::load_config(config_path);
    apply_out_dir(cfg, out_dir);
    apply_seed_count(cfg, seed_count);
    if (app.got_subcommand(run_cmd))
      return subcurve::run_experiment(cfg, jobs, std::cout);
    if (app.got_subcommand(probe_cmd)) return subcurve::run_probe(cfg, std::cout);
    if (app.got_subcommand(spectrum_cmd)) return subcurve::run_spectrum(cfg, std::cout);
  } catch (const subcurve::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
