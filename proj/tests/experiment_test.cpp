#include "subcurve/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace subcurve;
namespace fs = std::filesystem;

namespace {

fs::path temp_root() {
  const auto dir = fs::temp_directory_path() / "subcurve_experiment_test";
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const std::string& text) {
  const auto path = temp_root() / name;
  std::ofstream out(path, std::ios::trunc);
  out << text;
  return path;
}

const char* kTinyConfig = R"({
  "dataset": {"type": "blobs", "classes": 2, "per_class": 8, "dim": 4,
              "mean_scale": 3.0, "sigma": 0.4, "seed": 5},
  "holdout_fraction": 0.25,
  "model": {"widths": [4, 5, 2], "activation": "relu"},
  "optimizer": {"methods": ["sgd", "quasi_newton"], "etas": [0.05]},
  "epochs": 3,
  "batch_sizes": [6],
  "seeds": [1, 2],
  "out_dir": "unused"
})";

TEST(Config, ParsesWithDefaults) {
  const auto path = write_config("tiny.json", kTinyConfig);
  const ExperimentConfig cfg = load_config(path.string());
  EXPECT_EQ(cfg.dataset.classes, 2u);
  EXPECT_EQ(cfg.model.layer_widths, (std::vector<std::size_t>{4, 5, 2}));
  EXPECT_EQ(cfg.methods.size(), 2u);
  EXPECT_DOUBLE_EQ(cfg.opt_base.momentum_beta, 0.9);
  EXPECT_DOUBLE_EQ(cfg.opt_base.gamma, 0.9);
  EXPECT_DOUBLE_EQ(cfg.opt_base.weight_decay, 0.0);
  EXPECT_FALSE(cfg.opt_base.orthonormalize);
  EXPECT_DOUBLE_EQ(cfg.opt_base.lambda_floor, 1e-8);
  EXPECT_EQ(cfg.epochs, 3u);
}

TEST(Config, SyntaxErrorReportsLine) {
  const auto path = write_config("broken.json", "{\n  \"dataset\": {\n  oops\n}\n");
  try {
    load_config(path.string());
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(Config, SemanticValidation) {
  EXPECT_THROW(load_config((temp_root() / "missing.json").string()), ConfigError);
  const auto no_seeds = write_config("no_seeds.json", R"({
    "dataset": {"type": "blobs", "classes": 2, "per_class": 4, "dim": 4},
    "model": {"widths": [4, 2]},
    "seeds": []
  })");
  EXPECT_THROW(load_config(no_seeds.string()), ConfigError);
  const auto bad_width = write_config("bad_width.json", R"({
    "dataset": {"type": "blobs", "classes": 3, "per_class": 4, "dim": 4},
    "model": {"widths": [4, 2]}
  })");
  EXPECT_THROW(load_config(bad_width.string()), ConfigError);
  const auto missing_idx = write_config("missing_idx.json", R"({
    "dataset": {"type": "idx", "images": "/no/such/file", "labels": "/no/such/file"},
    "model": {"widths": [4, 2]}
  })");
  EXPECT_THROW(load_config(missing_idx.string()), ConfigError);
}

TEST(Config, HashIgnoresFieldOrderAndOutDir) {
  const auto a = write_config("hash_a.json", kTinyConfig);
  // same semantics, different field order and out_dir
  const auto b = write_config("hash_b.json", R"({
  "seeds": [1, 2],
  "epochs": 3,
  "batch_sizes": [6],
  "out_dir": "elsewhere",
  "optimizer": {"etas": [0.05], "methods": ["sgd", "quasi_newton"]},
  "model": {"activation": "relu", "widths": [4, 5, 2]},
  "holdout_fraction": 0.25,
  "dataset": {"seed": 5, "sigma": 0.4, "mean_scale": 3.0, "dim": 4,
              "per_class": 8, "classes": 2, "type": "blobs"}
})");
  const ExperimentConfig ca = load_config(a.string());
  const ExperimentConfig cb = load_config(b.string());
  EXPECT_EQ(ca.semantic_hash(), cb.semantic_hash());

  ExperimentConfig changed = ca;
  changed.etas = {0.01};
  EXPECT_NE(changed.semantic_hash(), ca.semantic_hash());
}

TEST(RunExperiment, WritesDeterministicOutputs) {
  const auto path = write_config("run.json", kTinyConfig);
  ExperimentConfig cfg = load_config(path.string());
  const auto out_a = temp_root() / "run_a";
  const auto out_b = temp_root() / "run_b";
  fs::remove_all(out_a);
  fs::remove_all(out_b);

  std::ostringstream log;
  cfg.out_dir = out_a.string();
  EXPECT_EQ(run_experiment(cfg, 1, log), 0);
  cfg.out_dir = out_b.string();
  EXPECT_EQ(run_experiment(cfg, 2, log), 0);  // different worker count

  const std::string csv_a = read_file(out_a / "metrics.csv");
  const std::string csv_b = read_file(out_b / "metrics.csv");
  EXPECT_FALSE(csv_a.empty());
  EXPECT_EQ(csv_a, csv_b);  // byte-identical, independent of jobs

  // 2 methods x 1 eta x 1 batch x 2 seeds = 4 cells, one SVG each
  std::size_t svg_count = 0;
  for (const auto& entry : fs::directory_iterator(out_a / "plots")) {
    ++svg_count;
    const std::string svg = read_file(entry.path());
    EXPECT_NE(svg.find("<svg"), std::string::npos);
    EXPECT_EQ(svg.find("http://"), svg.find("http://www.w3.org"));  // no other refs
    EXPECT_EQ(svg.find("href"), std::string::npos);                 // self-contained
  }
  EXPECT_EQ(svg_count, 4u);
  EXPECT_TRUE(fs::exists(out_a / "config.resolved.json"));
  EXPECT_TRUE(fs::exists(out_a / "summary.json"));
}

TEST(RunExperiment, GoldenCsvShape) {
  const auto path = write_config("golden.json", R"({
    "dataset": {"type": "blobs", "classes": 2, "per_class": 4, "dim": 4,
                "mean_scale": 3.0, "sigma": 0.1, "seed": 9},
    "holdout_fraction": 0.0,
    "model": {"widths": [4, 2], "activation": "identity"},
    "optimizer": {"methods": ["sgd"], "etas": [0.1], "momentum_beta": 0.0},
    "epochs": 2,
    "batch_sizes": [8],
    "seeds": [3]
  })");
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "golden_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  EXPECT_EQ(run_experiment(cfg, 1, log), 0);
  const std::string csv = read_file(out / "metrics.csv");
  std::stringstream ss(csv);
  std::string line;
  ASSERT_TRUE(std::getline(ss, line));
  EXPECT_EQ(line, "method,eta,batch_size,seed,epoch,step,split,loss,accuracy");
  // full-batch, 2 epochs, no holdout: exactly two train rows
  std::vector<std::string> rows;
  while (std::getline(ss, line))
    if (!line.empty()) rows.push_back(line);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].rfind("sgd,0.1,8,3,0,0,train,", 0), 0u) << rows[0];
  EXPECT_EQ(rows[1].rfind("sgd,0.1,8,3,1,1,train,", 0), 0u) << rows[1];
}

TEST(RunExperiment, DivergedCellGivesExitCode2) {
  const auto path = write_config("diverge.json", R"({
    "dataset": {"type": "blobs", "classes": 2, "per_class": 8, "dim": 4,
                "mean_scale": 3.0, "sigma": 0.4, "seed": 5},
    "holdout_fraction": 0.0,
    "model": {"widths": [4, 6, 2], "activation": "relu"},
    "optimizer": {"methods": ["sgd"], "etas": [1e7]},
    "epochs": 40,
    "batch_sizes": [8],
    "seeds": [1]
  })");
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "diverge_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  EXPECT_EQ(run_experiment(cfg, 1, log), 2);
  const std::string summary = read_file(out / "summary.json");
  EXPECT_NE(summary.find("\"diverged\""), std::string::npos);
}

TEST(Compare, TableAndJson) {
  const auto path = write_config("cmp_run.json", kTinyConfig);
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "cmp_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  ASSERT_EQ(run_experiment(cfg, 1, log), 0);

  std::ostringstream table;
  const auto json_path = out / "compare.json";
  const int rc = compare_metrics({(out / "metrics.csv").string()},
                                 json_path.string(), table);
  EXPECT_EQ(rc, 0);
  const std::string text = table.str();
  EXPECT_NE(text.find("sgd"), std::string::npos);
  EXPECT_NE(text.find("quasi_newton"), std::string::npos);
  EXPECT_NE(text.find("ResNet9/CIFAR-10"), std::string::npos);

  const auto j = nlohmann::json::parse(read_file(json_path));
  EXPECT_EQ(j.at("schema"), "compare-v1");
  EXPECT_EQ(j.at("rows").size(), 2u);  // 1 eta x 2 methods
  for (const auto& row : j.at("rows")) EXPECT_EQ(row.at("seeds"), 2);
  EXPECT_EQ(j.at("reference_resnet9_cifar10").size(), 3u);
}

TEST(Compare, SingleSeedHasZeroStd) {
  const auto path = write_config("cmp_single.json", R"({
    "dataset": {"type": "blobs", "classes": 2, "per_class": 8, "dim": 4,
                "mean_scale": 3.0, "sigma": 0.4, "seed": 5},
    "holdout_fraction": 0.25,
    "model": {"widths": [4, 2], "activation": "identity"},
    "optimizer": {"methods": ["sgd", "quasi_newton"], "etas": [0.05]},
    "epochs": 2,
    "batch_sizes": [6],
    "seeds": [1]
  })");
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "cmp_single_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  ASSERT_EQ(run_experiment(cfg, 1, log), 0);
  std::ostringstream table;
  const auto json_path = out / "compare.json";
  ASSERT_EQ(compare_metrics({(out / "metrics.csv").string()}, json_path.string(),
                            table),
            0);
  const auto j = nlohmann::json::parse(read_file(json_path));
  for (const auto& row : j.at("rows")) {
    EXPECT_EQ(row.at("seeds"), 1);
    EXPECT_DOUBLE_EQ(row.at("accuracy_std").get<double>(), 0.0);
    EXPECT_DOUBLE_EQ(row.at("loss_std").get<double>(), 0.0);
  }
}

TEST(Compare, MissingMethodIsIncompleteGrid) {
  // strip one method's rows from a real metrics file
  const auto path = write_config("cmp_missing.json", kTinyConfig);
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "cmp_missing_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  ASSERT_EQ(run_experiment(cfg, 1, log), 0);
  const std::string csv = read_file(out / "metrics.csv");
  std::stringstream ss(csv);
  std::string line, filtered;
  std::getline(ss, line);
  filtered = line + "\n";
  while (std::getline(ss, line))
    if (line.rfind("sgd,", 0) == 0) filtered += line + "\n";
  const auto partial = out / "metrics_sgd_only.csv";
  {
    std::ofstream pout(partial, std::ios::trunc);
    pout << filtered;
  }
  // a quasi_newton row from a second grid makes the sgd-only eta incomplete
  std::ostringstream table;
  const int rc = compare_metrics({partial.string()}, "", table);
  EXPECT_EQ(rc, 0);  // single-method grid is still a valid (1-column) table

  // now mix etas so one eta misses a method
  std::string mixed = filtered;
  mixed += "quasi_newton,0.99,6,1,0,0,train,0.5,0.5\n";
  const auto mixed_path = out / "metrics_mixed.csv";
  {
    std::ofstream mout(mixed_path, std::ios::trunc);
    mout << mixed;
  }
  std::ostringstream table2;
  EXPECT_EQ(compare_metrics({mixed_path.string()}, "", table2), 1);
  EXPECT_NE(table2.str().find("incomplete grid"), std::string::npos);
}

TEST(Probe, ReportShapeContract) {
  const auto path = write_config("probe.json", R"({
    "dataset": {"type": "blobs", "classes": 4, "per_class": 10, "dim": 8,
                "mean_scale": 4.0, "sigma": 0.5, "seed": 3},
    "holdout_fraction": 0.2,
    "model": {"widths": [8, 10, 4], "activation": "relu"},
    "optimizer": {"methods": ["quasi_newton"], "etas": [0.01]},
    "epochs": 4,
    "batch_sizes": [16],
    "seeds": [1],
    "probe": {"top_n": 12, "rank_rel_tol": 1e-6}
  })");
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "probe_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  ASSERT_EQ(run_probe(cfg, log), 0);

  const auto j = nlohmann::json::parse(read_file(out / "diagnostics.json"));
  EXPECT_EQ(j.at("schema"), "diag-v1");
  EXPECT_EQ(j.at("overlap").at("cosine_matrix").size(), 4u);
  EXPECT_EQ(j.at("overlap").at("cosine_matrix")[0].size(), 4u);
  // one rank entry per logged step: 4 epochs x ceil(32/16) = 8 steps
  EXPECT_EQ(j.at("rank_per_batch").size(), 8u);
  EXPECT_EQ(j.at("sigma_trace").size(), 8u);
  const std::size_t rank = j.at("overlap").at("combined_rank").get<std::size_t>();
  EXPECT_GE(rank, 4u);
  EXPECT_LE(rank, 8u);
  EXPECT_EQ(j.at("residuals").size(), 4u);
  EXPECT_EQ(j.at("spectrum").at("eigenvalues").size(), 12u);
  for (const auto& row : j.at("overlap").at("cosine_matrix"))
    for (const auto& v : row) {
      EXPECT_GE(v.get<double>(), 0.0);
      EXPECT_LE(v.get<double>(), 1.0 + 1e-12);
    }
  EXPECT_TRUE(fs::exists(out / "spectrum.svg"));
  EXPECT_TRUE(fs::exists(out / "rank_per_batch.svg"));
}

TEST(Probe, SelfOverlapSanityMode) {
  const auto path = write_config("probe_sanity.json", R"({
    "dataset": {"type": "blobs", "classes": 3, "per_class": 8, "dim": 6,
                "mean_scale": 4.0, "sigma": 0.3, "seed": 4},
    "holdout_fraction": 0.0,
    "model": {"widths": [6, 8, 3], "activation": "relu"},
    "optimizer": {"methods": ["sgd"], "etas": [0.05]},
    "epochs": 3,
    "batch_sizes": [24],
    "seeds": [2],
    "probe": {"self_overlap_sanity": true}
  })");
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "probe_sanity_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  ASSERT_EQ(run_probe(cfg, log), 0);
  const auto j = nlohmann::json::parse(read_file(out / "diagnostics.json"));
  EXPECT_NEAR(j.at("overlap").at("assignment_score").get<double>(), 1.0, 1e-10);
  EXPECT_EQ(j.at("overlap").at("combined_rank").get<std::size_t>(), 3u);
}

TEST(Probe, ZeroSigmaResidualsVanishWithinClass) {
  const auto path = write_config("probe_sigma0.json", R"({
    "dataset": {"type": "blobs", "classes": 3, "per_class": 6, "dim": 6,
                "mean_scale": 3.0, "sigma": 0.0, "seed": 6},
    "holdout_fraction": 0.0,
    "model": {"widths": [6, 3], "activation": "identity"},
    "optimizer": {"methods": ["sgd"], "etas": [0.05]},
    "epochs": 2,
    "batch_sizes": [18],
    "seeds": [2]
  })");
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "probe_sigma0_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  ASSERT_EQ(run_probe(cfg, log), 0);
  const auto j = nlohmann::json::parse(read_file(out / "diagnostics.json"));
  for (const auto& r : j.at("residuals")) {
    EXPECT_LT(r.at("mean_rel").get<double>(), 1e-10);
    EXPECT_LT(r.at("max_rel").get<double>(), 1e-10);
  }
}

TEST(Spectrum, WritesReport) {
  const auto path = write_config("spectrum.json", R"({
    "dataset": {"type": "blobs", "classes": 2, "per_class": 8, "dim": 4,
                "mean_scale": 3.0, "sigma": 0.4, "seed": 5},
    "holdout_fraction": 0.0,
    "model": {"widths": [4, 5, 2], "activation": "relu"},
    "optimizer": {"methods": ["sgd"], "etas": [0.05]},
    "epochs": 2,
    "batch_sizes": [16],
    "seeds": [1],
    "probe": {"top_n": 10}
  })");
  ExperimentConfig cfg = load_config(path.string());
  const auto out = temp_root() / "spectrum_out";
  fs::remove_all(out);
  cfg.out_dir = out.string();
  std::ostringstream log;
  ASSERT_EQ(run_spectrum(cfg, log), 0);
  const auto j = nlohmann::json::parse(read_file(out / "spectrum.json"));
  EXPECT_EQ(j.at("schema"), "diag-v1");
  EXPECT_EQ(j.at("spectrum").at("eigenvalues").size(), 10u);
  EXPECT_TRUE(fs::exists(out / "spectrum.svg"));
}

}  // namespace
