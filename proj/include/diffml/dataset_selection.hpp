#pragma once

// Learned dataset selection. Each training source k carries a logit lambda_k;
// pi = softmax(lambda) scales that source's gradients in the model update
//
//   theta' = theta - (lr / n) * sum_k pi_k * G_k,   G_k = sum of per-example
//                                                  gradients from source k,
//
// and lambda follows the gradient of a clean validation loss evaluated at
// theta'. Since theta' is linear in pi with the G_k held fixed, that gradient
// is available in closed form:
//
//   dL_val/dlambda_k = -(lr / n) * sum_j pi_j (delta_jk - pi_k) <G_j, grad L_val(theta')>.

#include <cstdint>
#include <vector>

#include "diffml/autodiff.hpp"
#include "diffml/data.hpp"
#include "diffml/nn.hpp"

namespace diffml::dataset_selection {

using autodiff::Value;

class SourceWeights {
 public:
  explicit SourceWeights(std::size_t sources, double initial_logit = 0.0);

  std::size_t size() const { return lambda_.cols(); }
  const Value& lambda() const { return lambda_; }
  std::vector<double> logits() const;
  // Stored shifted so the largest logit is 0.
  void set_logits(std::span<const double> logits);
  // softmax(lambda), max-shifted.
  std::vector<double> pi() const;

 private:
  Value lambda_;
};

struct WeightedStep {
  std::vector<double> candidate;      // theta'
  nn::GroupGradients group_gradients;  // G_k at theta
  std::size_t batch_rows = 0;          // n
};

// Candidate parameters from one weighted step; `model` keeps theta.
WeightedStep weighted_update(nn::MlpModel& model, const Matrix& x, const Matrix& targets,
                             std::span<const int> group_ids, const SourceWeights& weights,
                             double learning_rate);

struct MetaStepRecord {
  std::size_t step = 0;
  std::vector<double> pi_before;
  double val_loss_after_candidate = 0.0;
  std::vector<double> lambda_grad;
};

struct MetaGradient {
  std::vector<double> lambda_grad;
  double val_loss = 0.0;  // L_val(theta')
};

// `candidate` must already hold theta' (parameters are read, gradients
// overwritten). `pi` is the distribution that produced theta'.
MetaGradient meta_grad_lambda(nn::MlpModel& candidate, const nn::GroupGradients& group_gradients,
                              const Matrix& val_x, const Matrix& val_y, std::span<const double> pi,
                              double learning_rate, std::size_t batch_rows);

struct SelectionOptions {
  // Validation rows per lambda step; 0 means the training batch size.
  std::size_t val_batch_size = 0;
  // Update lambda once per epoch from the epoch's mean meta-gradient instead
  // of after every batch.
  bool epoch_level_lambda = false;
};

struct SelectionRecord {
  std::size_t step = 0;  // global step at the end of the epoch
  double val_rmse = 0.0;
  std::vector<double> pi;
};

struct SelectionHistory {
  std::vector<SelectionRecord> records;  // one per epoch
  std::vector<MetaStepRecord> meta_steps;
  std::size_t steps = 0;
};

// Requires config.optimizer == sgd: the committed step is exactly the
// candidate the meta-gradient was computed through.
SelectionHistory train_selection(const data::DatasetBundle& bundle, SourceWeights& weights,
                                 nn::MlpModel& model, const nn::TrainConfig& config,
                                 const SelectionOptions& options = {},
                                 const nn::StepObserver& observer = {});

}  // namespace diffml::dataset_selection
