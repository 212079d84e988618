#pragma once

// Learned feature selection: feature j enters the model as sigmoid(lambda_j) * x_j
// and the gate logits are trained together with the model. A PCA grid, one
// full training per component count, is the search it replaces.

#include <optional>
#include <string>
#include <vector>

#include "diffml/autodiff.hpp"
#include "diffml/data.hpp"
#include "diffml/nn.hpp"

namespace diffml::feature_selection {

using autodiff::Value;

inline constexpr double kDefaultGateLogit = 2.0;  // sigmoid(2) ~ 0.88
inline constexpr double kSelectedThreshold = 0.5;

class FeatureGates {
 public:
  explicit FeatureGates(std::size_t features, double initial_logit = kDefaultGateLogit);

  std::size_t size() const { return lambda_.cols(); }
  const Value& lambda() const { return lambda_; }
  std::vector<double> logits() const;
  void set_logits(std::span<const double> logits);
  std::vector<double> gates() const;
  // Indices with gate > 0.5.
  std::vector<std::size_t> selected() const;

 private:
  Value lambda_;  // 1 x f
};

// x * sigmoid(lambda), row by row. The gate row is expanded as
// ones(batch x 1) . sigmoid(lambda) so only plain matrix ops are recorded.
Value gate_apply(const FeatureGates& gates, const Value& x);
// Same with the gates treated as constants.
Value gate_apply_frozen(const FeatureGates& gates, const Value& x);

struct GateOptions {
  // Two-batch scheme of the cleaning trainer instead of one joint step.
  bool alternating = false;
  // Adds l1_weight * mean(gates) to the loss. Gates are positive, so this
  // is an L1 penalty.
  double l1_weight = 0.0;
};

struct GateEpoch {
  std::size_t epoch = 0;
  double val_rmse = 0.0;
  std::vector<double> gates;
};

struct GateHistory {
  std::vector<double> initial_gates;
  std::vector<GateEpoch> epochs;
  std::size_t steps = 0;
};

// Joint training: each batch's gradient drives one model step and one gate
// step. With lambda_learning_rate 0 the gates stay fixed and are applied as
// constants.
GateHistory train_gated(const data::DatasetBundle& bundle, FeatureGates& gates, nn::MlpModel& model,
                        const nn::TrainConfig& config, const GateOptions& options = {},
                        const nn::StepObserver& observer = {});

struct PcaModel {
  std::size_t component_count = 0;
  std::vector<double> mean;     // per input feature
  Matrix components;            // k x f, orthonormal rows
  std::vector<double> explained_variance;
  double total_variance = 0.0;  // trace of the covariance

  static PcaModel fit(const Matrix& x, std::size_t k);
  Matrix transform(const Matrix& x) const;
  Matrix inverse_transform(const Matrix& z) const;
  double explained_variance_ratio() const;
};

// Fits on the train features and projects all three splits; feature columns
// become pc0..pc{k-1}, the target is kept.
struct PcaBundle {
  PcaModel model;
  data::DatasetBundle bundle;
};
PcaBundle pca_fit_transform(const data::DatasetBundle& bundle, std::size_t k);

struct PcaCell {
  std::size_t k = 0;
  std::optional<double> val_rmse;
  std::optional<double> test_rmse;
  double seconds = 0.0;
  std::string status;  // "ok", "failed" or "timeout"
  std::string message;
};

struct PcaGridResult {
  std::vector<PcaCell> cells;  // one per k, in input order
  std::size_t pipelines_trained = 0;
  std::size_t test_reads = 0;
  bool timed_out = false;
};

// k values spread over [1, f], distinct and ascending; at most `count`.
std::vector<std::size_t> default_k_grid(std::size_t features, std::size_t count = 15);

// One full training per k. Cells not started before the budget runs out are
// reported as "timeout". A budget <= 0 completes none; no budget means run
// everything. Reads the test split once per completed cell.
PcaGridResult run_pca_grid(const data::DatasetBundle& bundle, const std::vector<std::size_t>& k_values,
                           const nn::TrainConfig& config,
                           std::optional<double> budget_seconds = std::nullopt);

}  // namespace diffml::feature_selection
