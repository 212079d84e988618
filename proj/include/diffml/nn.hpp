#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "diffml/autodiff.hpp"
#include "diffml/matrix.hpp"

namespace diffml::nn {

using autodiff::Value;

enum class OptimizerKind { sgd, adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(std::string_view name);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double learning_rate = 1e-3;         // model parameters
  double lambda_learning_rate = 1e-2;  // pipeline weights (mixtures, sources, gates)
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  OptimizerKind lambda_optimizer = OptimizerKind::adam;
  std::pair<double, double> adam_betas{0.9, 0.999};
  double adam_eps = 1e-8;
  std::vector<std::size_t> hidden_layers{32, 32};

  void validate() const;
  OptimizerSettings model_optimizer() const;
  OptimizerSettings weight_optimizer() const;
};

// First/second moment buffers for a flat parameter vector. Buffers are sized
// lazily on the first step.
struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step_count = 0;
};

// One optimizer step on a flat parameter vector. Throws (and leaves params and
// state untouched) when the gradient has a non-finite entry.
void optimizer_step(std::span<double> params, OptimizerState& state, std::span<const double> grad,
                    const OptimizerSettings& settings);

// Fully connected regressor: ReLU on hidden layers, identity on the scalar
// output. Copies are deep; each copy owns its parameters.
class MlpModel {
 public:
  MlpModel(std::vector<std::size_t> layer_dims, std::uint64_t seed);
  MlpModel(const MlpModel& other);
  MlpModel& operator=(const MlpModel& other);
  MlpModel(MlpModel&&) noexcept = default;
  MlpModel& operator=(MlpModel&&) noexcept = default;

  // Layer dims: input, hidden..., 1.
  static MlpModel regressor(std::size_t inputs, const TrainConfig& config);

  Value forward(const Value& x) const;
  Value forward(const Matrix& x) const { return forward(Value::constant(x)); }
  // Forward pass treating the parameters as constants: gradients flow into x
  // only.
  Value forward_frozen(const Value& x) const;
  // Forward pass without recording a graph.
  Matrix predict(const Matrix& x) const;

  const std::vector<std::size_t>& layer_dims() const { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  // Weights and biases interleaved: W0, b0, W1, b1, ...
  std::vector<Value>& parameters() { return params_; }
  const std::vector<Value>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> flat);
  std::vector<double> flat_gradients() const;
  void zero_grad();

 private:
  std::vector<std::size_t> dims_;
  std::vector<Value> params_;
};

Value batch_loss(const Value& pred, const Matrix& target);
double rmse(const Matrix& pred, const Matrix& target);
double rmse(const Value& pred, const Matrix& target);

// Sum of per-example gradients for each group id in [0, group_count). A group
// with no rows in the batch maps to a zero vector.
using GroupGradients = std::vector<std::vector<double>>;
GroupGradients per_group_gradients(MlpModel& model, const Matrix& x, const Matrix& targets,
                                   std::span<const int> group_ids, std::size_t group_count);

// theta <- optimizer(theta, gradient). The caller passes the already weighted
// and averaged gradient.
void apply_update(MlpModel& model, OptimizerState& state, std::span<const double> gradient,
                  const TrainConfig& config);

// Epoch-wise shuffled mini-batches over [0, n). Every epoch is a fresh seeded
// permutation; the final batch of an epoch may be short.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();
  std::size_t steps_per_epoch() const { return (n_ + batch_size_ - 1) / batch_size_; }

 private:
  void reshuffle();

  std::size_t n_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// Seed for an independent random stream derived from a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// Called after every committed model update with the global step index.
using StepObserver = std::function<void(std::size_t step, const MlpModel& model)>;

struct TrainHistory {
  std::vector<double> val_rmse;  // one entry per epoch
  std::size_t steps = 0;
};

// Plain mini-batch training on (x, y); the reference every learned pipeline
// is compared against.
TrainHistory train_mlp(MlpModel& model, const Matrix& x, const Matrix& y, const Matrix& val_x,
                       const Matrix& val_y, const TrainConfig& config,
                       const StepObserver& observer = {});

}  // namespace diffml::nn
