#pragma once

// Learned data cleaning: every (detector, repair) pair yields a repaired copy
// of the training table, and the model consumes the softmax-weighted convex
// combination of those copies. Pair weights are learned jointly with the model.

#include <string>
#include <variant>
#include <vector>

#include "diffml/autodiff.hpp"
#include "diffml/data.hpp"
#include "diffml/nn.hpp"

namespace diffml::cleaning {

using autodiff::Value;
using data::CellMask;
using data::Table;

struct MissingValueDetector {};
// Robust z-score: 0.6745 * |x - median| / MAD, with the mean absolute
// deviation (scaled by 1.253314) standing in when the MAD is zero.
struct ZScoreDetector {
  double threshold = 3.0;
};
// Equal-width histogram over the observed column range; cells falling in a
// bin holding less than min_freq of the observed cells are flagged.
struct HistogramDetector {
  int bin_count = 20;
  double min_freq = 0.01;
};
using Detector = std::variant<MissingValueDetector, ZScoreDetector, HistogramDetector>;

struct MeanImpute {};
struct MedianImpute {};
struct KnnImpute {
  int k = 5;
};
using Repair = std::variant<MeanImpute, MedianImpute, KnnImpute>;

std::string name_of(const Detector& detector);
std::string name_of(const Repair& repair);
void validate(const Detector& detector);
void validate(const Repair& repair);

// Flags feature cells only; the target column is never flagged.
CellMask detect(const Detector& detector, const Table& table);

// Replaces flagged cells; all other cells are copied bit for bit.
Table repair(const Repair& method, const Table& table, const CellMask& mask,
             std::vector<std::string>* warnings = nullptr);

struct RepairedVariant {
  std::size_t detector_idx = 0;
  std::size_t repair_idx = 0;
  Table table;
};

struct VariantOptions {
  // Per-column value for missing cells a detector did not flag, i.e. the
  // "dirty" encoding of a missing value. Empty means 0 for every column.
  std::vector<double> residual_fill;
};

// Variant p = d * |R| + r, so pair indices follow detector-major order.
std::vector<RepairedVariant> build_variants(const Table& table, const std::vector<Detector>& detectors,
                                            const std::vector<Repair>& repairs,
                                            const VariantOptions& options = {},
                                            std::vector<std::string>* warnings = nullptr);

// The dirty table with residual_fill substituted for every missing cell.
Table fill_missing(const Table& table, const std::vector<double>& fill);

class CleaningMixture {
 public:
  CleaningMixture(std::vector<Detector> detectors, std::vector<Repair> repairs,
                  bool free_pair_weights = false);

  const std::vector<Detector>& detectors() const { return detectors_; }
  const std::vector<Repair>& repairs() const { return repairs_; }
  std::size_t pair_count() const { return detectors_.size() * repairs_.size(); }
  bool free_pair_weights() const { return free_pairs_; }

  const Value& lambda_detectors() const { return lambda_d_; }
  const Value& lambda_repairs() const { return lambda_r_; }
  const Value& lambda_pairs() const { return lambda_pairs_; }
  // Every learnable weight vector, in a fixed order.
  std::vector<Value> weights() const;

  std::vector<double> flat_weights() const;
  void set_flat_weights(std::span<const double> flat);

  // Pin the distribution onto one pair: its logits 0, all others -1000, so
  // the softmax is exactly one-hot in double precision.
  void pin_one_hot(std::size_t pair);

  std::string pair_name(std::size_t pair) const;
  std::size_t pair_of(std::size_t detector, std::size_t repair) const {
    return detector * repairs_.size() + repair;
  }

 private:
  std::vector<Detector> detectors_;
  std::vector<Repair> repairs_;
  bool free_pairs_;
  Value lambda_d_;
  Value lambda_r_;
  Value lambda_pairs_;
};

// 1 x |D||R| softmax over (lambda_d + lambda_r), or over free pair logits.
Value pair_softmax(const CleaningMixture& mixture);
std::vector<double> pair_distribution(const CleaningMixture& mixture);

// Per row, sum_p sigma_p * variants[p].row; differentiable in sigma.
Value mixed_input(const Value& sigma, const std::vector<RepairedVariant>& variants,
                  std::span<const std::size_t> row_indices);

// Argmax over sigma, lowest pair index on ties.
std::size_t chosen_pair(std::span<const double> sigma);

enum class LambdaBatchSplit { train, val };

struct CleaningOptions {
  LambdaBatchSplit lambda_batch = LambdaBatchSplit::train;
};

struct CleaningEpoch {
  std::size_t epoch = 0;
  double val_rmse = 0.0;
  std::vector<double> sigma;
};

struct CleaningHistory {
  std::vector<double> initial_sigma;
  std::vector<CleaningEpoch> epochs;
  std::size_t steps = 0;
};

// Alternating two-batch training. Per step: batch A updates the model with
// sigma held constant; batch B updates the mixture weights with the model
// held constant. Batch A follows the same sampler stream as nn::train_mlp,
// so a degenerate mixture reproduces baseline training exactly.
// `val_variants` must be non-empty when lambda batches come from the val split.
CleaningHistory train_cleaning(const data::DatasetBundle& bundle,
                               const std::vector<RepairedVariant>& train_variants,
                               CleaningMixture& mixture, nn::MlpModel& model,
                               const nn::TrainConfig& config, const CleaningOptions& options = {},
                               const std::vector<RepairedVariant>& val_variants = {},
                               const nn::StepObserver& observer = {});

}  // namespace diffml::cleaning
