#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffml/error.hpp"
#include "diffml/harness.hpp"

namespace h = diffml::harness;
namespace fsys = std::filesystem;
using diffml::Error;
using diffml::ErrorCode;

namespace {

std::string read_file(const fsys::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ErrorCode parse_code(const std::string& text) {
  try {
    h::parse_config(text).validate();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::timeout;  // sentinel: accepted
}

// Small, fast variants of each experiment.
h::ExperimentConfig small(h::Experiment experiment) {
  auto c = h::default_config(experiment);
  c.data.synth.n_rows = 200;
  c.train_config.epochs = 3;
  c.train_config.hidden_layers = {8};
  c.seeds = {0, 1};
  c.features.pca_k_count = 3;
  return c;
}

fsys::path scratch(const std::string& name) {
  const auto dir = fsys::temp_directory_path() / ("diffml_harness_" + name);
  fsys::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Config, MinimalConfigGetsDefaults) {
  const auto c = h::parse_config(R"({"experiment": "cleaning"})");
  EXPECT_EQ(c.experiment, h::Experiment::cleaning);
  EXPECT_EQ(c.cleaning.detectors.size(), 3u);
  EXPECT_EQ(c.cleaning.repairs.size(), 2u);
  EXPECT_EQ(c.baselines, (std::vector<std::string>{"dirty", "grid_all_pairs"}));
  EXPECT_FALSE(c.seeds.empty());
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(h::parse_config(R"({"experiment": "dataset_selection"})").train_config.optimizer,
            diffml::nn::OptimizerKind::sgd);
}

TEST(Config, FullConfigRoundTrips) {
  const auto c = h::parse_config(R"({
    "experiment": "feature_selection",
    "data": {"synth": {"n_rows": 300, "n_informative": 5, "n_noise": 20}},
    "split": {"train": 0.6, "val": 0.2, "test": 0.2},
    "train_config": {"learning_rate": 0.003, "epochs": 12, "optimizer": "adam", "hidden_layers": [16]},
    "baselines": ["no_selection"],
    "seeds": [3, 4],
    "output_dir": "out",
    "budget_seconds": 10,
    "options": {"pca_k_values": [1, 5, 25], "l1_weight": 0.1}
  })");
  EXPECT_EQ(c.data.synth.n_noise, 20u);
  EXPECT_EQ(c.train_config.epochs, 12u);
  EXPECT_EQ(c.train_config.hidden_layers, std::vector<std::size_t>{16});
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.features.pca_k_values, (std::vector<std::size_t>{1, 5, 25}));
  const auto again = h::parse_config(h::config_to_json(c));
  EXPECT_EQ(h::config_to_json(again), h::config_to_json(c));
  EXPECT_EQ(h::config_hash(again), h::config_hash(c));
}

TEST(Config, HashIgnoresOutputDirAndJobs) {
  auto a = h::default_config(h::Experiment::cleaning);
  auto b = a;
  b.output_dir = "elsewhere";
  b.jobs = 4;
  EXPECT_EQ(h::config_hash(a), h::config_hash(b));
  b.train_config.epochs += 1;
  EXPECT_NE(h::config_hash(a), h::config_hash(b));
  EXPECT_EQ(h::config_hash(a).size(), 16u);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "epochs": 3})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "train_config": {"lr": 1}})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "data": {"synth": {"rows": 5}}})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "options": {"sources": 2}})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "error_specs": [{"kind": "missing", "ratio": 0.1}]})"),
            ErrorCode::config_error);
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_EQ(parse_code("{not json"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "clustering"})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "seeds": []})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "baselines": ["pca_grid"]})"), ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "train_config": {"learning_rate": 0}})"),
            ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "split": {"train": 0.5, "val": 0.2, "test": 0.2}})"),
            ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "dataset_selection", "train_config": {"optimizer": "adam"}})"),
            ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "error_specs": [{"kind": "missing", "rate": 2}]})"),
            ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "options": {"detectors": ["dbscan"]}})"),
            ErrorCode::config_error);
  EXPECT_EQ(parse_code(R"({"experiment": "cleaning", "seeds": "0"})"), ErrorCode::config_error);
}

TEST(Config, LoadFromFile) {
  const auto dir = scratch("load");
  fsys::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"experiment": "dataset_selection", "seeds": [7]})";
  EXPECT_EQ(h::load_config(dir / "c.json").seeds, std::vector<std::uint64_t>{7});
  EXPECT_THROW(h::load_config(dir / "missing.json"), Error);
  fsys::remove_all(dir);
}

TEST(Config, BaselinesPerExperiment) {
  EXPECT_EQ(h::baselines_for(h::Experiment::dataset_selection), std::vector<std::string>{"union_default"});
  EXPECT_EQ(h::baselines_for(h::Experiment::feature_selection),
            (std::vector<std::string>{"no_selection", "pca_grid"}));
  EXPECT_EQ(h::experiment_from_string(h::to_string(h::Experiment::feature_selection)),
            h::Experiment::feature_selection);
}

TEST(Bundle, EveryMethodOfASeedSeesTheSameCorruptedData) {
  const auto c = small(h::Experiment::cleaning);
  const auto a = h::prepare_bundle(c, 3);
  const auto b = h::prepare_bundle(c, 3);
  EXPECT_EQ(diffml::data::hash_bundle(a), diffml::data::hash_bundle(b));
  EXPECT_GT(a.train.missing_count(), 0u);
  EXPECT_EQ(a.val.missing_count(), 0u);
  EXPECT_EQ(a.test.unsealed().missing_count(), 0u);
  EXPECT_NE(diffml::data::hash_bundle(h::prepare_bundle(c, 4)), diffml::data::hash_bundle(a));
}

TEST(Run, CleaningCountsPipelines) {
  const auto report = h::run_experiment(small(h::Experiment::cleaning));
  EXPECT_EQ(report.methods, (std::vector<std::string>{"diffml", "dirty", "grid_all_pairs"}));
  ASSERT_EQ(report.results.size(), 6u);
  for (std::uint64_t seed : {0u, 1u}) {
    EXPECT_EQ(report.pipelines("diffml", seed), 1u);
    EXPECT_EQ(report.pipelines("dirty", seed), 1u);
    EXPECT_EQ(report.pipelines("grid_all_pairs", seed), 6u);
    for (const auto& m : report.methods) {
      const auto* r = report.find(seed, m);
      ASSERT_NE(r, nullptr);
      EXPECT_EQ(r->status, "ok") << r->message;
      EXPECT_TRUE(r->test_rmse.has_value());
    }
    EXPECT_EQ(report.find(seed, "diffml")->test_reads, 1u);
    EXPECT_EQ(report.find(seed, "dirty")->test_reads, 1u);
  }
  EXPECT_EQ(report.grid.size(), 12u);
  EXPECT_EQ(report.weight_columns.size(), 6u);
  EXPECT_EQ(report.weight_columns.front().rfind("sigma__", 0), 0u);
  EXPECT_EQ(report.weights.size(), 2u * 3u);
  EXPECT_EQ(h::exit_code_for(report), 0);
}

TEST(Run, SelectionAndFeatureExperiments) {
  const auto sel = h::run_experiment(small(h::Experiment::dataset_selection));
  EXPECT_EQ(h::exit_code_for(sel), 0);
  EXPECT_EQ(sel.weight_columns, (std::vector<std::string>{"pi__source0", "pi__source1"}));
  EXPECT_EQ(sel.pipelines("union_default", 0), 1u);

  const auto feat = h::run_experiment(small(h::Experiment::feature_selection));
  EXPECT_EQ(h::exit_code_for(feat), 0);
  EXPECT_EQ(feat.pipelines("diffml", 1), 1u);
  EXPECT_EQ(feat.pipelines("no_selection", 1), 1u);
  EXPECT_EQ(feat.pipelines("pca_grid", 1), 3u);
  EXPECT_EQ(feat.weight_columns.size(), 25u);
  EXPECT_EQ(feat.weight_columns.front(), "gate__x0");
  EXPECT_FALSE(feat.find(0, "diffml")->selected.empty());
}

TEST(Run, ParallelJobsGiveTheSameNumbers) {
  auto c = small(h::Experiment::dataset_selection);
  const auto serial = h::run_experiment(c);
  c.jobs = 3;
  const auto parallel = h::run_experiment(c);
  ASSERT_EQ(serial.results.size(), parallel.results.size());
  for (std::size_t i = 0; i < serial.results.size(); ++i) {
    EXPECT_EQ(serial.results[i].method, parallel.results[i].method);
    EXPECT_EQ(serial.results[i].test_rmse, parallel.results[i].test_rmse);
  }
}

TEST(Run, EmittedFilesAreByteIdenticalAcrossRuns) {
  const auto c = small(h::Experiment::cleaning);
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  h::emit_report(h::run_experiment(c), a);
  h::emit_report(h::run_experiment(c), b);
  for (const char* f : {"summary.csv", "weights_cleaning.csv", "grid.csv"}) {
    ASSERT_TRUE(fsys::exists(a / f)) << f;
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  const auto summary = read_file(a / "summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "seed,method,status,val_rmse,test_rmse,pipelines,test_reads,selected");
  EXPECT_NE(read_file(a / "config.json").find("run_at"), std::string::npos);
  fsys::remove_all(a);
  fsys::remove_all(b);
}

TEST(Run, ReportRoundTrips) {
  const auto dir = scratch("roundtrip");
  const auto report = h::run_experiment(small(h::Experiment::feature_selection));
  h::emit_report(report, dir);
  const auto loaded = h::load_report(dir / "report.json");
  EXPECT_EQ(loaded.config_hash, report.config_hash);
  EXPECT_EQ(loaded.results.size(), report.results.size());
  const auto again = scratch("roundtrip_again");
  h::emit_report(loaded, again);
  for (const char* f : {"summary.csv", "weights_feature_selection.csv", "grid.csv", "timing.csv"})
    EXPECT_EQ(read_file(dir / f), read_file(again / f)) << f;
  fsys::remove_all(dir);
  fsys::remove_all(again);
}

TEST(Run, TimedOutGridIsAPartialFailure) {
  auto c = small(h::Experiment::cleaning);
  c.seeds = {0};
  c.budget_seconds = 0.0;
  const auto report = h::run_experiment(c);
  EXPECT_EQ(report.find(0, "diffml")->status, "ok");
  EXPECT_EQ(report.find(0, "grid_all_pairs")->status, "timeout");
  EXPECT_EQ(report.pipelines("grid_all_pairs", 0), 0u);
  EXPECT_EQ(h::exit_code_for(report), 3);
}

TEST(Run, MissingCsvFailsEveryCellWithoutThrowing) {
  auto c = small(h::Experiment::cleaning);
  c.data.csv = "/nonexistent/data.csv";
  const auto report = h::run_experiment(c);
  EXPECT_EQ(report.failed_cells(), report.results.size());
  EXPECT_EQ(h::exit_code_for(report), 2);
  const auto dir = scratch("failed");
  h::emit_report(report, dir);
  const auto summary = read_file(dir / "summary.csv");
  EXPECT_NE(summary.find("0,diffml,failed,,,"), std::string::npos) << summary;
  fsys::remove_all(dir);
}

TEST(Run, NullSelectionKeepsPiNearUniform) {
  auto c = h::default_config(h::Experiment::dataset_selection);
  c.error_specs.clear();
  c.seeds = {0, 1};
  const auto report = h::run_experiment(c);
  for (const auto& w : report.weights)
    for (double pi : w.values) {
      EXPECT_GE(pi, 0.35);
      EXPECT_LE(pi, 0.65);
    }
}
