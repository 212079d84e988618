#pragma once

// Config-driven experiments: for every seed, build one corrupted dataset,
// train the learned pipeline and each requested baseline on it, and score
// all of them on the same clean test split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffml/cleaning.hpp"
#include "diffml/data.hpp"
#include "diffml/nn.hpp"

namespace diffml::harness {

enum class Experiment { cleaning, dataset_selection, feature_selection };
std::string_view to_string(Experiment experiment);
Experiment experiment_from_string(std::string_view name);

struct DataSource {
  std::optional<std::filesystem::path> csv;  // otherwise synthetic
  std::string target = "y";
  data::SynthSpec synth;                      // seed is replaced per run seed
};

struct CleaningSettings {
  std::vector<cleaning::Detector> detectors;
  std::vector<cleaning::Repair> repairs;
  cleaning::LambdaBatchSplit lambda_batch = cleaning::LambdaBatchSplit::train;
  bool free_pair_weights = false;
};

struct SelectionSettings {
  std::size_t sources = 2;
  std::size_t val_batch_size = 0;
  bool epoch_level_lambda = false;
};

struct FeatureSettings {
  std::size_t pca_k_count = 15;
  std::vector<std::size_t> pca_k_values;  // overrides pca_k_count when set
  bool alternating = false;
  double l1_weight = 0.0;
  double gate_init = 2.0;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::cleaning;
  DataSource data;
  data::SplitFractions split;
  std::vector<data::ErrorSpec> error_specs;
  nn::TrainConfig train_config;
  std::vector<std::string> baselines;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "diffml_out";
  double budget_seconds = 120.0;  // per grid baseline
  std::size_t jobs = 1;

  CleaningSettings cleaning;
  SelectionSettings selection;
  FeatureSettings features;

  // Throws Error(config_error) on any inconsistency.
  void validate() const;
};

// Experiment-specific defaults used for keys a config file leaves out.
ExperimentConfig default_config(Experiment experiment);

// Parses the JSON config format; unknown keys are rejected.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Fully resolved config, every key present.
std::string config_to_json(const ExperimentConfig& config);
// FNV-1a of the resolved config, 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

// Valid baseline names per experiment.
std::vector<std::string> baselines_for(Experiment experiment);

struct MethodResult {
  std::uint64_t seed = 0;
  std::string method;
  std::string status;  // "ok", "failed", "timeout"
  std::optional<double> val_rmse;
  std::optional<double> test_rmse;
  double seconds = 0.0;
  std::size_t pipelines = 0;   // full trainings this cell ran
  std::size_t test_reads = 0;  // opens of the test split
  std::string selected;        // grid baselines: the val-selected cell
  std::string message;
};

struct GridRow {
  std::uint64_t seed = 0;
  std::string method;
  std::string cell;
  std::string status;
  std::optional<double> val_rmse;
  std::optional<double> test_rmse;
  double seconds = 0.0;
};

struct WeightRow {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;  // global step at the epoch's end for dataset selection
  double val_rmse = 0.0;
  std::vector<double> values;
};

struct RunReport {
  std::string experiment;
  std::string config_hash;
  std::string config_json;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> methods;       // "diffml" then the baselines
  std::vector<std::string> bundle_hashes;  // one per seed
  std::vector<MethodResult> results;      // ordered by (seed, method)
  std::vector<GridRow> grid;
  std::vector<std::string> weight_columns;
  std::vector<WeightRow> weights;
  std::vector<std::string> warnings;

  const MethodResult* find(std::uint64_t seed, const std::string& method) const;
  std::size_t failed_cells() const;
  std::size_t pipelines(const std::string& method, std::uint64_t seed) const;
};

struct GridCellResult {
  std::size_t detector = 0;
  std::size_t repair = 0;
  std::string name;
  std::string status;
  std::optional<double> val_rmse;
  std::optional<double> test_rmse;
  double seconds = 0.0;
  std::string message;
};

struct GridBaselineResult {
  std::vector<GridCellResult> cells;
  std::size_t pipelines_trained = 0;
  std::size_t test_reads = 0;
  bool timed_out = false;
};

// One independent model per variant, same architecture and seed handling as
// the learned run; val/test come from the clean splits of `bundle`.
GridBaselineResult run_grid_baseline(const data::DatasetBundle& bundle,
                                     const std::vector<cleaning::RepairedVariant>& variants,
                                     const std::vector<std::string>& variant_names,
                                     const nn::TrainConfig& config,
                                     std::optional<double> budget_seconds = std::nullopt);

// The per-seed corrupted, standardized bundle every method of that seed uses.
data::DatasetBundle prepare_bundle(const ExperimentConfig& config, std::uint64_t seed,
                                   std::vector<std::string>* warnings = nullptr);

RunReport run_experiment(const ExperimentConfig& config);

// summary.csv, timing.csv, grid.csv, weights_<experiment>.csv, config.json
// (with run_at) and report.json.
void emit_report(const RunReport& report, const std::filesystem::path& output_dir);
RunReport load_report(const std::filesystem::path& report_json);

// 0 all cells ok, 2 every cell failed, 3 some failed.
int exit_code_for(const RunReport& report);

}  // namespace diffml::harness
