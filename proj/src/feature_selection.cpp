#include "diffml/feature_selection.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>

#include "diffml/error.hpp"

namespace diffml::feature_selection {

FeatureGates::FeatureGates(std::size_t features, double initial_logit) {
  if (features == 0) throw Error(ErrorCode::invalid_argument, "FeatureGates: need at least one feature");
  if (!std::isfinite(initial_logit)) throw Error(ErrorCode::invalid_argument, "FeatureGates: non-finite logit");
  lambda_ = Value::parameter(Matrix(1, features, initial_logit), "lambda_gates");
}

std::vector<double> FeatureGates::logits() const {
  const auto v = lambda_.data().values();
  return {v.begin(), v.end()};
}

void FeatureGates::set_logits(std::span<const double> logits) {
  auto dst = lambda_.mutable_data().values();
  if (logits.size() != dst.size()) {
    throw Error(ErrorCode::shape_mismatch, "FeatureGates: expected " + std::to_string(dst.size()) +
                                               " logits, got " + std::to_string(logits.size()));
  }
  std::copy(logits.begin(), logits.end(), dst.begin());
}

std::vector<double> FeatureGates::gates() const {
  const Value g = autodiff::sigmoid(lambda_.detached());
  const auto v = g.data().values();
  return {v.begin(), v.end()};
}

std::vector<std::size_t> FeatureGates::selected() const {
  std::vector<std::size_t> out;
  const auto g = gates();
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (g[j] > kSelectedThreshold) out.push_back(j);
  }
  return out;
}

namespace {

Value expand_and_mul(const Value& lambda, const Value& x) {
  if (x.cols() != lambda.cols()) {
    throw Error(ErrorCode::shape_mismatch, "gate_apply: " + std::to_string(lambda.cols()) +
                                               " gates for " + std::to_string(x.cols()) + " features");
  }
  const Value ones = Value::constant(Matrix(x.rows(), 1, 1.0));
  return autodiff::elementwise_mul(x, autodiff::matmul(ones, autodiff::sigmoid(lambda)));
}

void check_complete(const data::Table& table, const char* split) {
  if (table.missing_count() > 0) {
    throw Error(ErrorCode::invalid_argument,
                std::string("train_gated: ") + split + " split has missing cells");
  }
}

}  // namespace

Value gate_apply(const FeatureGates& gates, const Value& x) { return expand_and_mul(gates.lambda(), x); }

Value gate_apply_frozen(const FeatureGates& gates, const Value& x) {
  return expand_and_mul(gates.lambda().detached(), x);
}

GateHistory train_gated(const data::DatasetBundle& bundle, FeatureGates& gates, nn::MlpModel& model,
                        const nn::TrainConfig& config, const GateOptions& options,
                        const nn::StepObserver& observer) {
  config.validate();
  const std::size_t f = bundle.train.n_features();
  if (f == 0) throw Error(ErrorCode::invalid_argument, "train_gated: table has no feature columns");
  if (gates.size() != f || model.input_dim() != f) {
    throw Error(ErrorCode::shape_mismatch, "train_gated: " + std::to_string(f) + " features, " +
                                               std::to_string(gates.size()) + " gates, model input " +
                                               std::to_string(model.input_dim()));
  }
  if (options.l1_weight < 0.0 || !std::isfinite(options.l1_weight)) {
    throw Error(ErrorCode::invalid_argument, "train_gated: l1_weight must be finite and >= 0");
  }
  check_complete(bundle.train, "train");
  check_complete(bundle.val, "val");

  const Matrix x = bundle.train.feature_matrix();
  const Matrix y = bundle.train.target_matrix();
  const Matrix val_x = bundle.val.feature_matrix();
  const Matrix val_y = bundle.val.target_matrix();
  const bool learn_gates = config.lambda_learning_rate > 0.0;

  nn::BatchSampler model_batches(x.rows(), config.batch_size, nn::derive_seed(config.seed, 1));
  nn::BatchSampler gate_batches(x.rows(), config.batch_size, nn::derive_seed(config.seed, 2));
  nn::OptimizerState model_state;
  nn::OptimizerState gate_state;
  std::vector<double> params = model.flat_parameters();
  std::vector<double> logits = gates.logits();
  Value lambda = gates.lambda();

  auto with_penalty = [&](Value loss) {
    if (options.l1_weight == 0.0) return loss;
    return autodiff::add(loss, autodiff::scalar_mul(autodiff::mean(autodiff::sigmoid(lambda)), options.l1_weight));
  };
  auto check_loss = [&](const Value& loss, const char* what) {
    if (!std::isfinite(loss.item())) {
      throw Error(ErrorCode::non_finite, std::string("train_gated: non-finite ") + what + " at step " +
                                             std::to_string(model_state.step_count));
    }
  };
  auto gate_step = [&]() {
    nn::optimizer_step(logits, gate_state, lambda.grad().values(), config.weight_optimizer());
    gates.set_logits(logits);
  };

  GateHistory history;
  history.initial_gates = gates.gates();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t s = 0; s < model_batches.steps_per_epoch(); ++s) {
      const auto rows = model_batches.next();
      const Value xb = Value::constant(gather_rows(x, rows));
      const bool joint = learn_gates && !options.alternating;
      const Value gated = joint ? gate_apply(gates, xb) : gate_apply_frozen(gates, xb);
      Value loss = nn::batch_loss(model.forward(gated), gather_rows(y, rows));
      if (joint) loss = with_penalty(loss);
      check_loss(loss, "loss");
      model.zero_grad();
      lambda.zero_grad();
      autodiff::backward(loss);
      nn::optimizer_step(params, model_state, model.flat_gradients(), config.model_optimizer());
      model.set_flat_parameters(params);
      if (joint) gate_step();
      if (observer) observer(history.steps, model);

      if (learn_gates && options.alternating) {
        const auto gate_rows = gate_batches.next();
        const Value gb = gate_apply(gates, Value::constant(gather_rows(x, gate_rows)));
        const Value gate_loss = with_penalty(nn::batch_loss(model.forward_frozen(gb), gather_rows(y, gate_rows)));
        check_loss(gate_loss, "gate loss");
        lambda.zero_grad();
        autodiff::backward(gate_loss);
        gate_step();
      }
      ++history.steps;
    }
    const Value val_in = gate_apply_frozen(gates, Value::constant(val_x));
    history.epochs.push_back({epoch, nn::rmse(model.predict(val_in.data()), val_y), gates.gates()});
  }
  return history;
}

PcaModel PcaModel::fit(const Matrix& x, std::size_t k) {
  const std::size_t n = x.rows();
  const std::size_t f = x.cols();
  if (f == 0) throw Error(ErrorCode::invalid_argument, "pca: no feature columns");
  if (k < 1 || k > f) {
    throw Error(ErrorCode::invalid_argument,
                "pca: k must be in [1, " + std::to_string(f) + "], got " + std::to_string(k));
  }
  if (n < 2) throw Error(ErrorCode::invalid_argument, "pca: need at least 2 rows");
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, "pca: input has non-finite cells");
  }

  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMatrix> data(x.values().data(), static_cast<Eigen::Index>(n),
                                         static_cast<Eigen::Index>(f));
  const Eigen::RowVectorXd mu = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error(ErrorCode::non_finite, "pca: eigendecomposition failed");

  PcaModel model;
  model.component_count = k;
  model.mean.assign(mu.data(), mu.data() + f);
  model.components = Matrix(k, f);
  model.total_variance = cov.trace();
  // Eigen sorts eigenvalues ascending.
  const auto& values = solver.eigenvalues();
  const auto& vectors = solver.eigenvectors();
  for (std::size_t i = 0; i < k; ++i) {
    const Eigen::Index col = static_cast<Eigen::Index>(f - 1 - i);
    model.explained_variance.push_back(std::max(0.0, values(col)));
    // Sign convention: the largest-magnitude entry is positive.
    Eigen::Index pivot = 0;
    vectors.col(col).cwiseAbs().maxCoeff(&pivot);
    const double sign = vectors(pivot, col) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < f; ++j) model.components(i, j) = sign * vectors(static_cast<Eigen::Index>(j), col);
  }
  return model;
}

Matrix PcaModel::transform(const Matrix& x) const {
  const std::size_t f = mean.size();
  if (x.cols() != f) {
    throw Error(ErrorCode::shape_mismatch, "pca transform: expected " + std::to_string(f) + " columns, got " +
                                               std::to_string(x.cols()));
  }
  Matrix z(x.rows(), component_count);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t i = 0; i < component_count; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < f; ++j) acc += (x(r, j) - mean[j]) * components(i, j);
      z(r, i) = acc;
    }
  }
  return z;
}

Matrix PcaModel::inverse_transform(const Matrix& z) const {
  if (z.cols() != component_count) {
    throw Error(ErrorCode::shape_mismatch, "pca inverse: expected " + std::to_string(component_count) +
                                               " columns, got " + std::to_string(z.cols()));
  }
  const std::size_t f = mean.size();
  Matrix x(z.rows(), f);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    for (std::size_t j = 0; j < f; ++j) {
      double acc = mean[j];
      for (std::size_t i = 0; i < component_count; ++i) acc += z(r, i) * components(i, j);
      x(r, j) = acc;
    }
  }
  return x;
}

double PcaModel::explained_variance_ratio() const {
  if (total_variance <= 0.0) return 0.0;
  double sum = 0.0;
  for (double v : explained_variance) sum += v;
  return sum / total_variance;
}

namespace {

data::Table project(const PcaModel& pca, const data::Table& table) {
  const Matrix z = pca.transform(table.feature_matrix());
  data::Table out;
  for (std::size_t i = 0; i < pca.component_count; ++i) {
    out.column_names.push_back("pc" + std::to_string(i));
    out.columns.emplace_back(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) out.columns.back()[r] = z(r, i);
  }
  out.column_names.push_back(table.column_names[table.target_column]);
  out.columns.push_back(table.columns[table.target_column]);
  out.target_column = pca.component_count;
  return out;
}

}  // namespace

PcaBundle pca_fit_transform(const data::DatasetBundle& bundle, std::size_t k) {
  if (bundle.train.missing_count() > 0 || bundle.val.missing_count() > 0) {
    throw Error(ErrorCode::invalid_argument, "pca_fit_transform: splits must not contain missing cells");
  }
  PcaBundle out{PcaModel::fit(bundle.train.feature_matrix(), k), {}};
  out.bundle.train = project(out.model, bundle.train);
  out.bundle.val = project(out.model, bundle.val);
  out.bundle.test = data::SealedTable(project(out.model, bundle.test.unsealed()));
  out.bundle.source_ids = bundle.source_ids;
  out.bundle.standardizer = bundle.standardizer;
  out.bundle.indices = bundle.indices;
  out.bundle.standardized = bundle.standardized;
  return out;
}

std::vector<std::size_t> default_k_grid(std::size_t features, std::size_t count) {
  if (features == 0 || count == 0) throw Error(ErrorCode::invalid_argument, "default_k_grid: empty grid");
  std::vector<std::size_t> ks;
  if (count == 1) return {features};
  for (std::size_t i = 0; i < count; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(count - 1);
    const auto k = static_cast<std::size_t>(std::llround(1.0 + t * static_cast<double>(features - 1)));
    if (ks.empty() || ks.back() != k) ks.push_back(k);
  }
  return ks;
}

PcaGridResult run_pca_grid(const data::DatasetBundle& bundle, const std::vector<std::size_t>& k_values,
                           const nn::TrainConfig& config, std::optional<double> budget_seconds) {
  if (k_values.empty()) throw Error(ErrorCode::invalid_argument, "run_pca_grid: no k values");
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  PcaGridResult result;
  for (std::size_t k : k_values) {
    PcaCell cell;
    cell.k = k;
    const double elapsed = std::chrono::duration<double>(Clock::now() - start).count();
    if (budget_seconds && elapsed >= *budget_seconds) {
      cell.status = "timeout";
      cell.message = "grid budget of " + data::format_number(*budget_seconds) + " s exhausted";
      result.timed_out = true;
      result.cells.push_back(std::move(cell));
      continue;
    }
    const auto cell_start = Clock::now();
    try {
      PcaBundle projected = pca_fit_transform(bundle, k);
      nn::MlpModel model = nn::MlpModel::regressor(k, config);
      const Matrix val_x = projected.bundle.val.feature_matrix();
      const Matrix val_y = projected.bundle.val.target_matrix();
      ++result.pipelines_trained;
      nn::train_mlp(model, projected.bundle.train.feature_matrix(), projected.bundle.train.target_matrix(),
                    val_x, val_y, config);
      cell.val_rmse = nn::rmse(model.predict(val_x), val_y);
      const data::Table& test = projected.bundle.test.open();
      cell.test_rmse = nn::rmse(model.predict(test.feature_matrix()), test.target_matrix());
      result.test_reads += projected.bundle.test.reads();
      cell.status = "ok";
    } catch (const Error& e) {
      cell.status = "failed";
      cell.message = e.what();
    }
    cell.seconds = std::chrono::duration<double>(Clock::now() - cell_start).count();
    result.cells.push_back(std::move(cell));
  }
  return result;
}

}  // namespace diffml::feature_selection
