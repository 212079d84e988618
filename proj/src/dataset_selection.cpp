#include "diffml/dataset_selection.hpp"

#include <algorithm>
#include <cmath>

#include "diffml/error.hpp"

namespace diffml::dataset_selection {

SourceWeights::SourceWeights(std::size_t sources, double initial_logit) {
  if (sources == 0) throw Error(ErrorCode::invalid_argument, "SourceWeights: need at least one source");
  lambda_ = Value::parameter(Matrix(1, sources, initial_logit), "lambda_sources");
  set_logits(logits());
}

std::vector<double> SourceWeights::logits() const {
  const auto v = lambda_.data().values();
  return {v.begin(), v.end()};
}

void SourceWeights::set_logits(std::span<const double> logits) {
  auto dst = lambda_.mutable_data().values();
  if (logits.size() != dst.size()) {
    throw Error(ErrorCode::shape_mismatch, "SourceWeights: expected " + std::to_string(dst.size()) +
                                               " logits, got " + std::to_string(logits.size()));
  }
  // Stored relative to the largest logit. pi only depends on differences, and
  // a canonical representative keeps shifted runs bit-identical.
  const double top = *std::max_element(logits.begin(), logits.end());
  std::transform(logits.begin(), logits.end(), dst.begin(), [top](double l) { return l - top; });
}

std::vector<double> SourceWeights::pi() const {
  const Value pi = autodiff::softmax_rowwise(lambda_.detached());
  const auto values = pi.data().values();
  return {values.begin(), values.end()};
}

WeightedStep weighted_update(nn::MlpModel& model, const Matrix& x, const Matrix& targets,
                             std::span<const int> group_ids, const SourceWeights& weights,
                             double learning_rate) {
  if (x.rows() == 0) throw Error(ErrorCode::invalid_argument, "weighted_update: empty batch");
  WeightedStep step;
  step.group_gradients = nn::per_group_gradients(model, x, targets, group_ids, weights.size());
  step.batch_rows = x.rows();
  const auto pi = weights.pi();
  step.candidate = model.flat_parameters();
  const double scale = learning_rate / static_cast<double>(step.batch_rows);
  for (std::size_t k = 0; k < pi.size(); ++k) {
    const auto& g = step.group_gradients[k];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw Error(ErrorCode::non_finite,
                    "weighted_update: non-finite gradient for source " + std::to_string(k));
      }
      step.candidate[i] -= scale * pi[k] * g[i];
    }
  }
  return step;
}

MetaGradient meta_grad_lambda(nn::MlpModel& candidate, const nn::GroupGradients& group_gradients,
                              const Matrix& val_x, const Matrix& val_y, std::span<const double> pi,
                              double learning_rate, std::size_t batch_rows) {
  if (val_x.rows() == 0) throw Error(ErrorCode::invalid_argument, "meta_grad_lambda: empty validation batch");
  if (group_gradients.size() != pi.size()) {
    throw Error(ErrorCode::shape_mismatch, "meta_grad_lambda: " + std::to_string(group_gradients.size()) +
                                               " group gradients for " + std::to_string(pi.size()) +
                                               " sources");
  }
  if (batch_rows == 0) throw Error(ErrorCode::invalid_argument, "meta_grad_lambda: batch_rows is 0");
  const Value loss = nn::batch_loss(candidate.forward(val_x), val_y);
  candidate.zero_grad();
  autodiff::backward(loss);
  const auto val_grad = candidate.flat_gradients();
  candidate.zero_grad();

  const std::size_t k_count = pi.size();
  std::vector<double> dots(k_count, 0.0);
  for (std::size_t j = 0; j < k_count; ++j) {
    const auto& g = group_gradients[j];
    if (g.size() != val_grad.size()) {
      throw Error(ErrorCode::shape_mismatch, "meta_grad_lambda: gradient length mismatch");
    }
    for (std::size_t i = 0; i < g.size(); ++i) dots[j] += g[i] * val_grad[i];
  }
  double weighted_dot = 0.0;
  for (std::size_t j = 0; j < k_count; ++j) weighted_dot += pi[j] * dots[j];

  MetaGradient out;
  out.val_loss = loss.item();
  out.lambda_grad.resize(k_count);
  const double scale = -learning_rate / static_cast<double>(batch_rows);
  // sum_j pi_j (delta_jk - pi_k) dots_j = pi_k (dots_k - sum_j pi_j dots_j)
  for (std::size_t k = 0; k < k_count; ++k) out.lambda_grad[k] = scale * pi[k] * (dots[k] - weighted_dot);
  return out;
}

SelectionHistory train_selection(const data::DatasetBundle& bundle, SourceWeights& weights,
                                 nn::MlpModel& model, const nn::TrainConfig& config,
                                 const SelectionOptions& options, const nn::StepObserver& observer) {
  config.validate();
  if (config.optimizer != nn::OptimizerKind::sgd) {
    throw Error(ErrorCode::config_error,
                "train_selection: the weighted update is an SGD step; set optimizer to sgd");
  }
  const std::size_t n_train = bundle.train.n_rows();
  if (bundle.source_ids.size() != n_train) {
    throw Error(ErrorCode::invalid_argument, "train_selection: source_ids do not cover the train split");
  }
  if (bundle.source_count() > weights.size()) {
    throw Error(ErrorCode::invalid_argument, "train_selection: bundle has " +
                                                 std::to_string(bundle.source_count()) + " sources, weights cover " +
                                                 std::to_string(weights.size()));
  }
  if (bundle.val.n_rows() == 0) throw Error(ErrorCode::invalid_argument, "train_selection: empty validation split");
  if (bundle.val.missing_count() > 0 || bundle.train.missing_count() > 0) {
    throw Error(ErrorCode::invalid_argument, "train_selection: splits must not contain missing cells");
  }

  const Matrix x = bundle.train.feature_matrix();
  const Matrix y = bundle.train.target_matrix();
  const Matrix val_x = bundle.val.feature_matrix();
  const Matrix val_y = bundle.val.target_matrix();
  const std::size_t val_batch = options.val_batch_size == 0 ? config.batch_size : options.val_batch_size;

  nn::BatchSampler train_batches(n_train, config.batch_size, nn::derive_seed(config.seed, 1));
  nn::BatchSampler val_batches(val_x.rows(), val_batch, nn::derive_seed(config.seed, 3));
  nn::OptimizerState lambda_state;
  const bool learn_lambda = config.lambda_learning_rate > 0.0 && weights.size() > 1;

  SelectionHistory history;
  std::vector<double> epoch_grad(weights.size(), 0.0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::size_t epoch_steps = 0;
    std::fill(epoch_grad.begin(), epoch_grad.end(), 0.0);
    for (std::size_t s = 0; s < train_batches.steps_per_epoch(); ++s) {
      const auto rows = train_batches.next();
      std::vector<int> groups;
      groups.reserve(rows.size());
      for (auto r : rows) groups.push_back(bundle.source_ids[r]);
      const auto pi = weights.pi();
      WeightedStep step = weighted_update(model, gather_rows(x, rows), gather_rows(y, rows), groups,
                                          weights, config.learning_rate);
      model.set_flat_parameters(step.candidate);

      if (learn_lambda) {
        const auto val_rows = val_batches.next();
        const MetaGradient meta = meta_grad_lambda(model, step.group_gradients, gather_rows(val_x, val_rows),
                                                   gather_rows(val_y, val_rows), pi, config.learning_rate,
                                                   step.batch_rows);
        if (!std::isfinite(meta.val_loss)) {
          throw Error(ErrorCode::non_finite, "train_selection: non-finite validation loss at step " +
                                                 std::to_string(history.steps));
        }
        history.meta_steps.push_back({history.steps, pi, meta.val_loss, meta.lambda_grad});
        if (options.epoch_level_lambda) {
          for (std::size_t k = 0; k < epoch_grad.size(); ++k) epoch_grad[k] += meta.lambda_grad[k];
        } else {
          auto logits = weights.logits();
          nn::optimizer_step(logits, lambda_state, meta.lambda_grad, config.weight_optimizer());
          weights.set_logits(logits);
        }
      }
      if (observer) observer(history.steps, model);
      ++history.steps;
      ++epoch_steps;
    }
    if (learn_lambda && options.epoch_level_lambda && epoch_steps > 0) {
      for (double& g : epoch_grad) g /= static_cast<double>(epoch_steps);
      auto logits = weights.logits();
      nn::optimizer_step(logits, lambda_state, epoch_grad, config.weight_optimizer());
      weights.set_logits(logits);
    }
    history.records.push_back({history.steps, nn::rmse(model.predict(val_x), val_y), weights.pi()});
  }
  return history;
}

}  // namespace diffml::dataset_selection
