#include "diffml/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "diffml/error.hpp"

namespace diffml::nn {

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_from_string(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw Error(ErrorCode::config_error, "unknown optimizer '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::config_error, "learning_rate must be > 0");
  if (!(lambda_learning_rate >= 0.0)) {
    throw Error(ErrorCode::config_error, "lambda_learning_rate must be >= 0");
  }
  if (batch_size < 1) throw Error(ErrorCode::config_error, "batch_size must be >= 1");
  if (epochs < 1) throw Error(ErrorCode::config_error, "epochs must be >= 1");
  if (!(adam_betas.first >= 0.0 && adam_betas.first < 1.0 && adam_betas.second >= 0.0 &&
        adam_betas.second < 1.0)) {
    throw Error(ErrorCode::config_error, "adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw Error(ErrorCode::config_error, "adam_eps must be > 0");
  for (auto width : hidden_layers)
    if (width == 0) throw Error(ErrorCode::config_error, "hidden layer width must be >= 1");
}

OptimizerSettings TrainConfig::model_optimizer() const {
  return {optimizer, learning_rate, adam_betas.first, adam_betas.second, adam_eps};
}

OptimizerSettings TrainConfig::weight_optimizer() const {
  return {lambda_optimizer, lambda_learning_rate, adam_betas.first, adam_betas.second, adam_eps};
}

void optimizer_step(std::span<double> params, OptimizerState& state, std::span<const double> grad,
                    const OptimizerSettings& settings) {
  if (grad.size() != params.size()) {
    throw Error(ErrorCode::shape_mismatch, "optimizer_step: gradient has " +
                                               std::to_string(grad.size()) + " entries for " +
                                               std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw Error(ErrorCode::non_finite,
                  "optimizer_step: non-finite gradient entry at " + std::to_string(i));
    }
  }
  const double lr = settings.learning_rate;
  if (settings.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
    ++state.step_count;
    return;
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
    state.step_count = 0;
  }
  ++state.step_count;
  const double b1 = settings.beta1;
  const double b2 = settings.beta2;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = b1 * m + (1.0 - b1) * grad[i];
    v = b2 * v + (1.0 - b2) * grad[i] * grad[i];
    params[i] -= lr * (m / c1) / (std::sqrt(v / c2) + settings.eps);
  }
}

MlpModel::MlpModel(std::vector<std::size_t> layer_dims, std::uint64_t seed)
    : dims_(std::move(layer_dims)) {
  if (dims_.size() < 2) throw Error(ErrorCode::invalid_argument, "MLP needs at least 2 layers");
  if (dims_.back() != 1) throw Error(ErrorCode::invalid_argument, "MLP output dim must be 1");
  for (auto d : dims_)
    if (d == 0) throw Error(ErrorCode::invalid_argument, "MLP layer dims must be >= 1");

  // He-normal weights, zero biases.
  std::mt19937_64 rng(seed);
  for (std::size_t layer = 0; layer + 1 < dims_.size(); ++layer) {
    const std::size_t fan_in = dims_[layer];
    const std::size_t fan_out = dims_[layer + 1];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Matrix w(fan_in, fan_out);
    for (double& v : w.values()) v = dist(rng);
    params_.push_back(Value::parameter(std::move(w), "W" + std::to_string(layer)));
    params_.push_back(Value::parameter(Matrix(1, fan_out), "b" + std::to_string(layer)));
  }
}

MlpModel::MlpModel(const MlpModel& other) : dims_(other.dims_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(Value::parameter(p.data(), p.label()));
}

MlpModel& MlpModel::operator=(const MlpModel& other) {
  if (this != &other) {
    MlpModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

MlpModel MlpModel::regressor(std::size_t inputs, const TrainConfig& config) {
  std::vector<std::size_t> dims{inputs};
  dims.insert(dims.end(), config.hidden_layers.begin(), config.hidden_layers.end());
  dims.push_back(1);
  return MlpModel(std::move(dims), derive_seed(config.seed, 0x1417));
}

namespace {

Value forward_through(std::span<const Value> params, Value h) {
  const std::size_t layers = params.size() / 2;
  for (std::size_t layer = 0; layer < layers; ++layer) {
    h = autodiff::add(autodiff::matmul(h, params[2 * layer]), params[2 * layer + 1]);
    if (layer + 1 < layers) h = autodiff::relu(h);
  }
  return h;
}

}  // namespace

Value MlpModel::forward(const Value& x) const {
  if (x.cols() != dims_.front()) {
    throw Error(ErrorCode::shape_mismatch, "mlp_forward: input has " + std::to_string(x.cols()) +
                                               " features, model expects " +
                                               std::to_string(dims_.front()));
  }
  return forward_through(params_, x);
}

Value MlpModel::forward_frozen(const Value& x) const {
  if (x.cols() != dims_.front()) {
    throw Error(ErrorCode::shape_mismatch, "mlp_forward: input has " + std::to_string(x.cols()) +
                                               " features, model expects " +
                                               std::to_string(dims_.front()));
  }
  std::vector<Value> frozen;
  frozen.reserve(params_.size());
  for (const auto& p : params_) frozen.push_back(Value::constant(p.data()));
  return forward_through(frozen, x);
}

Matrix MlpModel::predict(const Matrix& x) const { return forward_frozen(Value::constant(x)).data(); }

std::size_t MlpModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.data().size();
  return total;
}

std::vector<double> MlpModel::flat_parameters() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) {
    auto v = p.data().values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

void MlpModel::set_flat_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw Error(ErrorCode::shape_mismatch, "set_flat_parameters: expected " +
                                               std::to_string(parameter_count()) + " values, got " +
                                               std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto& p : params_) {
    auto dst = p.mutable_data().values();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
              flat.begin() + static_cast<std::ptrdiff_t>(offset + dst.size()), dst.begin());
    offset += dst.size();
  }
}

std::vector<double> MlpModel::flat_gradients() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) {
    auto g = p.grad().values();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  return flat;
}

void MlpModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Value batch_loss(const Value& pred, const Matrix& target) {
  if (target.rows() == 0) throw Error(ErrorCode::invalid_argument, "batch_loss: empty batch");
  return autodiff::mse_loss(pred, target);
}

double rmse(const Matrix& pred, const Matrix& target) {
  if (!pred.same_shape(target)) {
    throw Error(ErrorCode::shape_mismatch,
                "rmse: " + pred.shape_string() + " vs " + target.shape_string());
  }
  if (pred.empty()) throw Error(ErrorCode::invalid_argument, "rmse: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.values()[i] - target.values()[i];
    total += d * d;
  }
  return std::sqrt(total / static_cast<double>(pred.size()));
}

double rmse(const Value& pred, const Matrix& target) { return rmse(pred.data(), target); }

GroupGradients per_group_gradients(MlpModel& model, const Matrix& x, const Matrix& targets,
                                   std::span<const int> group_ids, std::size_t group_count) {
  if (group_ids.size() != x.rows() || targets.rows() != x.rows()) {
    throw Error(ErrorCode::shape_mismatch, "per_group_gradients: " +
                                               std::to_string(group_ids.size()) + " group ids, " +
                                               std::to_string(x.rows()) + " rows, " +
                                               std::to_string(targets.rows()) + " targets");
  }
  std::vector<std::vector<std::size_t>> members(group_count);
  for (std::size_t i = 0; i < group_ids.size(); ++i) {
    const int id = group_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= group_count) {
      throw Error(ErrorCode::invalid_argument,
                  "per_group_gradients: unknown group id " + std::to_string(id));
    }
    members[static_cast<std::size_t>(id)].push_back(i);
  }

  GroupGradients result(group_count, std::vector<double>(model.parameter_count(), 0.0));
  for (std::size_t k = 0; k < group_count; ++k) {
    if (members[k].empty()) continue;
    const Matrix xb = gather_rows(x, members[k]);
    const Matrix yb = gather_rows(targets, members[k]);
    // Sum of per-example squared errors = count * mean.
    const Value loss = autodiff::scalar_mul(batch_loss(model.forward(xb), yb),
                                            static_cast<double>(members[k].size()));
    model.zero_grad();
    autodiff::backward(loss);
    result[k] = model.flat_gradients();
  }
  model.zero_grad();
  return result;
}

void apply_update(MlpModel& model, OptimizerState& state, std::span<const double> gradient,
                  const TrainConfig& config) {
  std::vector<double> params = model.flat_parameters();
  optimizer_step(params, state, gradient, config.model_optimizer());
  model.set_flat_parameters(params);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finalizer over the combined key.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), rng_(seed), order_(n) {
  if (n == 0) throw Error(ErrorCode::invalid_argument, "BatchSampler: no rows to sample");
  if (batch_size == 0) throw Error(ErrorCode::invalid_argument, "BatchSampler: batch_size is 0");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  if (cursor_ >= n_) reshuffle();
  const std::size_t end = std::min(n_, cursor_ + batch_size_);
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return batch;
}

TrainHistory train_mlp(MlpModel& model, const Matrix& x, const Matrix& y, const Matrix& val_x,
                       const Matrix& val_y, const TrainConfig& config,
                       const StepObserver& observer) {
  config.validate();
  BatchSampler sampler(x.rows(), config.batch_size, derive_seed(config.seed, 1));
  OptimizerState state;
  TrainHistory history;
  std::vector<double> params = model.flat_parameters();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t s = 0; s < sampler.steps_per_epoch(); ++s) {
      const auto rows = sampler.next();
      const Value loss = batch_loss(model.forward(gather_rows(x, rows)), gather_rows(y, rows));
      if (!std::isfinite(loss.item())) {
        throw Error(ErrorCode::non_finite, "train_mlp: non-finite loss at step " +
                                               std::to_string(history.steps));
      }
      model.zero_grad();
      autodiff::backward(loss);
      optimizer_step(params, state, model.flat_gradients(), config.model_optimizer());
      model.set_flat_parameters(params);
      if (observer) observer(history.steps, model);
      ++history.steps;
    }
    if (val_x.rows() > 0) history.val_rmse.push_back(rmse(model.predict(val_x), val_y));
  }
  return history;
}

}  // namespace diffml::nn
