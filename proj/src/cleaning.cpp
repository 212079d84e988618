#include "diffml/cleaning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "diffml/error.hpp"

namespace diffml::cleaning {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::vector<double> observed_values(const Table& table, std::size_t col) {
  std::vector<double> out;
  for (double v : table.columns[col])
    if (!std::isnan(v)) out.push_back(v);
  return out;
}

double median_of(std::vector<double> values) {
  const std::size_t n = values.size();
  std::sort(values.begin(), values.end());
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void check_mask_shape(const Table& table, const CellMask& mask) {
  if (mask.rows() != table.n_rows() || mask.cols() != table.n_cols()) {
    throw Error(ErrorCode::shape_mismatch,
                "repair: mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                    ", table is " + std::to_string(table.n_rows()) + "x" + std::to_string(table.n_cols()));
  }
}

// Cells that carry a trustworthy value: present and not flagged.
bool usable(const Table& table, const CellMask& mask, std::size_t r, std::size_t c) {
  return !mask(r, c) && !table.is_missing(r, c);
}

// Fallback statistic over usable cells; 0 (the standardized mean) when none exist.
double usable_mean(const Table& table, const CellMask& mask, std::size_t c,
                   std::vector<std::string>* warnings) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < table.n_rows(); ++r) {
    if (!usable(table, mask, r, c)) continue;
    sum += table.at(r, c);
    ++count;
  }
  if (count == 0) {
    if (warnings) {
      warnings->push_back("column '" + table.column_names[c] +
                          "' is entirely flagged; imputing 0");
    }
    return 0.0;
  }
  return sum / static_cast<double>(count);
}

void knn_repair(int k, const Table& table, const CellMask& mask, Table& out,
                std::vector<std::string>* warnings) {
  const std::size_t n = table.n_rows();
  const auto features = table.feature_columns();
  std::vector<double> fallback(table.n_cols(), std::numeric_limits<double>::quiet_NaN());
  std::vector<std::pair<double, std::size_t>> neighbours;
  neighbours.reserve(n);

  for (std::size_t i = 0; i < n; ++i) {
    bool needs_repair = false;
    for (auto c : features) needs_repair = needs_repair || mask(i, c);
    if (!needs_repair) continue;

    // Squared distance over mutually usable features; NaN when none are shared.
    std::vector<double> dist(n, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t r = 0; r < n; ++r) {
      if (r == i) continue;
      double acc = 0.0;
      bool shared = false;
      for (auto c : features) {
        if (!usable(table, mask, i, c) || !usable(table, mask, r, c)) continue;
        const double d = table.at(i, c) - table.at(r, c);
        acc += d * d;
        shared = true;
      }
      if (shared) dist[r] = acc;
    }

    for (auto c : features) {
      if (!mask(i, c)) continue;
      neighbours.clear();
      for (std::size_t r = 0; r < n; ++r) {
        if (std::isnan(dist[r]) || !usable(table, mask, r, c)) continue;
        neighbours.emplace_back(dist[r], r);
      }
      if (neighbours.empty()) {
        if (std::isnan(fallback[c])) fallback[c] = usable_mean(table, mask, c, warnings);
        out.set(i, c, fallback[c]);
        continue;
      }
      const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), neighbours.size());
      std::partial_sort(neighbours.begin(), neighbours.begin() + static_cast<std::ptrdiff_t>(take),
                        neighbours.end());
      double sum = 0.0;
      for (std::size_t q = 0; q < take; ++q) sum += table.at(neighbours[q].second, c);
      out.set(i, c, sum / static_cast<double>(take));
    }
  }
}

}  // namespace

std::string name_of(const Detector& detector) {
  return std::visit(overloaded{[](const MissingValueDetector&) { return std::string("missing_value"); },
                               [](const ZScoreDetector&) { return std::string("zscore"); },
                               [](const HistogramDetector&) { return std::string("histogram"); }},
                    detector);
}

std::string name_of(const Repair& repair) {
  return std::visit(overloaded{[](const MeanImpute&) { return std::string("mean"); },
                               [](const MedianImpute&) { return std::string("median"); },
                               [](const KnnImpute&) { return std::string("knn"); }},
                    repair);
}

void validate(const Detector& detector) {
  std::visit(overloaded{[](const MissingValueDetector&) {},
                        [](const ZScoreDetector& d) {
                          if (!(d.threshold > 0.0)) {
                            throw Error(ErrorCode::invalid_argument, "zscore threshold must be > 0");
                          }
                        },
                        [](const HistogramDetector& d) {
                          if (d.bin_count < 1) {
                            throw Error(ErrorCode::invalid_argument, "histogram bin_count must be >= 1");
                          }
                          if (!(d.min_freq > 0.0 && d.min_freq < 1.0)) {
                            throw Error(ErrorCode::invalid_argument,
                                        "histogram min_freq must lie in (0, 1)");
                          }
                        }},
             detector);
}

void validate(const Repair& repair) {
  if (const auto* knn = std::get_if<KnnImpute>(&repair); knn && knn->k < 1) {
    throw Error(ErrorCode::invalid_argument, "knn k must be >= 1");
  }
}

CellMask detect(const Detector& detector, const Table& table) {
  validate(detector);
  CellMask mask(table.n_rows(), table.n_cols());
  const auto features = table.feature_columns();
  std::visit(
      overloaded{
          [&](const MissingValueDetector&) {
            for (auto c : features)
              for (std::size_t r = 0; r < table.n_rows(); ++r)
                if (table.is_missing(r, c)) mask.set(r, c);
          },
          [&](const ZScoreDetector& d) {
            for (auto c : features) {
              auto values = observed_values(table, c);
              if (values.empty()) continue;
              const double med = median_of(values);
              std::vector<double> deviations;
              deviations.reserve(values.size());
              for (double v : values) deviations.push_back(std::abs(v - med));
              const double mad = median_of(deviations);
              double scale = mad / 0.6745;
              if (mad == 0.0) {
                const double mean_ad =
                    std::accumulate(deviations.begin(), deviations.end(), 0.0) /
                    static_cast<double>(deviations.size());
                scale = 1.253314 * mean_ad;
              }
              if (scale == 0.0) continue;
              for (std::size_t r = 0; r < table.n_rows(); ++r) {
                const double v = table.at(r, c);
                if (!std::isnan(v) && std::abs(v - med) / scale > d.threshold) mask.set(r, c);
              }
            }
          },
          [&](const HistogramDetector& d) {
            for (auto c : features) {
              const auto values = observed_values(table, c);
              if (values.empty()) continue;
              const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
              const double lo = *lo_it;
              const double hi = *hi_it;
              if (hi == lo) continue;
              const auto bins = static_cast<std::size_t>(d.bin_count);
              auto bin_of = [&](double v) {
                const auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
                return std::min(b, bins - 1);
              };
              std::vector<std::size_t> counts(bins, 0);
              for (double v : values) ++counts[bin_of(v)];
              const double total = static_cast<double>(values.size());
              for (std::size_t r = 0; r < table.n_rows(); ++r) {
                const double v = table.at(r, c);
                if (std::isnan(v)) continue;
                if (static_cast<double>(counts[bin_of(v)]) / total < d.min_freq) mask.set(r, c);
              }
            }
          }},
      detector);
  return mask;
}

Table repair(const Repair& method, const Table& table, const CellMask& mask,
             std::vector<std::string>* warnings) {
  validate(method);
  check_mask_shape(table, mask);
  Table out = table;
  std::visit(overloaded{
                 [&](const MeanImpute&) {
                   for (auto c : table.feature_columns()) {
                     bool any = false;
                     for (std::size_t r = 0; r < table.n_rows() && !any; ++r) any = mask(r, c);
                     if (!any) continue;
                     const double fill = usable_mean(table, mask, c, warnings);
                     for (std::size_t r = 0; r < table.n_rows(); ++r)
                       if (mask(r, c)) out.set(r, c, fill);
                   }
                 },
                 [&](const MedianImpute&) {
                   for (auto c : table.feature_columns()) {
                     std::vector<double> kept;
                     bool any = false;
                     for (std::size_t r = 0; r < table.n_rows(); ++r) {
                       any = any || mask(r, c);
                       if (usable(table, mask, r, c)) kept.push_back(table.at(r, c));
                     }
                     if (!any) continue;
                     double fill = 0.0;
                     if (kept.empty()) {
                       if (warnings) {
                         warnings->push_back("column '" + table.column_names[c] +
                                             "' is entirely flagged; imputing 0");
                       }
                     } else {
                       fill = median_of(std::move(kept));
                     }
                     for (std::size_t r = 0; r < table.n_rows(); ++r)
                       if (mask(r, c)) out.set(r, c, fill);
                   }
                 },
                 [&](const KnnImpute& knn) { knn_repair(knn.k, table, mask, out, warnings); }},
             method);
  return out;
}

Table fill_missing(const Table& table, const std::vector<double>& fill) {
  if (!fill.empty() && fill.size() != table.n_cols()) {
    throw Error(ErrorCode::shape_mismatch, "residual fill has " + std::to_string(fill.size()) +
                                               " entries for " + std::to_string(table.n_cols()) +
                                               " columns");
  }
  Table out = table;
  for (auto c : table.feature_columns())
    for (std::size_t r = 0; r < table.n_rows(); ++r)
      if (out.is_missing(r, c)) out.set(r, c, fill.empty() ? 0.0 : fill[c]);
  return out;
}

std::vector<RepairedVariant> build_variants(const Table& table, const std::vector<Detector>& detectors,
                                            const std::vector<Repair>& repairs,
                                            const VariantOptions& options,
                                            std::vector<std::string>* warnings) {
  if (detectors.empty() || repairs.empty()) {
    throw Error(ErrorCode::invalid_argument, "build_variants needs at least one detector and one repair");
  }
  std::vector<RepairedVariant> variants;
  variants.reserve(detectors.size() * repairs.size());
  for (std::size_t d = 0; d < detectors.size(); ++d) {
    const CellMask mask = detect(detectors[d], table);
    for (std::size_t r = 0; r < repairs.size(); ++r) {
      variants.push_back({d, r, fill_missing(repair(repairs[r], table, mask, warnings), options.residual_fill)});
    }
  }
  return variants;
}

CleaningMixture::CleaningMixture(std::vector<Detector> detectors, std::vector<Repair> repairs,
                                 bool free_pair_weights)
    : detectors_(std::move(detectors)), repairs_(std::move(repairs)), free_pairs_(free_pair_weights) {
  if (detectors_.empty() || repairs_.empty()) {
    throw Error(ErrorCode::invalid_argument, "mixture needs at least one detector and one repair");
  }
  for (const auto& d : detectors_) validate(d);
  for (const auto& r : repairs_) validate(r);
  lambda_d_ = Value::parameter(Matrix(1, detectors_.size()), "lambda_d");
  lambda_r_ = Value::parameter(Matrix(1, repairs_.size()), "lambda_r");
  if (free_pairs_) lambda_pairs_ = Value::parameter(Matrix(1, pair_count()), "lambda_pairs");
}

std::vector<Value> CleaningMixture::weights() const {
  if (free_pairs_) return {lambda_pairs_};
  return {lambda_d_, lambda_r_};
}

std::vector<double> CleaningMixture::flat_weights() const {
  std::vector<double> flat;
  for (const auto& w : weights()) {
    auto v = w.data().values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

void CleaningMixture::set_flat_weights(std::span<const double> flat) {
  std::size_t offset = 0;
  for (auto w : weights()) {
    auto dst = w.mutable_data().values();
    if (offset + dst.size() > flat.size()) {
      throw Error(ErrorCode::shape_mismatch, "set_flat_weights: too few values");
    }
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
  if (offset != flat.size()) throw Error(ErrorCode::shape_mismatch, "set_flat_weights: too many values");
}

void CleaningMixture::pin_one_hot(std::size_t pair) {
  if (pair >= pair_count()) throw Error(ErrorCode::invalid_argument, "pin_one_hot: pair out of range");
  constexpr double kOff = -1000.0;
  if (free_pairs_) {
    auto v = lambda_pairs_.mutable_data().values();
    std::fill(v.begin(), v.end(), kOff);
    v[pair] = 0.0;
    return;
  }
  auto d = lambda_d_.mutable_data().values();
  auto r = lambda_r_.mutable_data().values();
  std::fill(d.begin(), d.end(), kOff);
  std::fill(r.begin(), r.end(), kOff);
  d[pair / repairs_.size()] = 0.0;
  r[pair % repairs_.size()] = 0.0;
}

std::string CleaningMixture::pair_name(std::size_t pair) const {
  return name_of(detectors_.at(pair / repairs_.size())) + "__" + name_of(repairs_.at(pair % repairs_.size()));
}

Value pair_softmax(const CleaningMixture& mixture) {
  if (mixture.free_pair_weights()) {
    return autodiff::softmax_rowwise(mixture.lambda_pairs());
  }
  const std::size_t n_d = mixture.detectors().size();
  const std::size_t n_r = mixture.repairs().size();
  // logits[d * R + r] = lambda_d[d] + lambda_r[r], written as two indicator matmuls.
  Matrix expand_d(n_d, n_d * n_r);
  Matrix expand_r(n_r, n_d * n_r);
  for (std::size_t d = 0; d < n_d; ++d) {
    for (std::size_t r = 0; r < n_r; ++r) {
      expand_d(d, d * n_r + r) = 1.0;
      expand_r(r, d * n_r + r) = 1.0;
    }
  }
  const Value logits =
      autodiff::add(autodiff::matmul(mixture.lambda_detectors(), Value::constant(expand_d)),
                    autodiff::matmul(mixture.lambda_repairs(), Value::constant(expand_r)));
  return autodiff::softmax_rowwise(logits);
}

std::vector<double> pair_distribution(const CleaningMixture& mixture) {
  const Value sigma = pair_softmax(mixture);
  const auto values = sigma.data().values();
  return {values.begin(), values.end()};
}

Value mixed_input(const Value& sigma, const std::vector<RepairedVariant>& variants,
                  std::span<const std::size_t> row_indices) {
  if (variants.empty()) throw Error(ErrorCode::invalid_argument, "mixed_input: no variants");
  if (sigma.rows() != 1 || sigma.cols() != variants.size()) {
    throw Error(ErrorCode::shape_mismatch, "mixed_input: sigma is " + sigma.data().shape_string() +
                                               " for " + std::to_string(variants.size()) + " variants");
  }
  const Table& first = variants.front().table;
  const auto features = first.feature_columns();
  for (const auto& v : variants) {
    if (v.table.n_rows() != first.n_rows() || v.table.n_cols() != first.n_cols()) {
      throw Error(ErrorCode::shape_mismatch, "mixed_input: variants differ in shape");
    }
  }
  for (auto row : row_indices) {
    if (row >= first.n_rows()) {
      throw Error(ErrorCode::invalid_argument, "mixed_input: row index " + std::to_string(row) +
                                                   " out of range (" + std::to_string(first.n_rows()) +
                                                   " rows)");
    }
  }
  // Gather each variant's batch once; reused by the backward closure.
  auto batches = std::make_shared<std::vector<Matrix>>();
  batches->reserve(variants.size());
  for (const auto& v : variants) {
    Matrix xb(row_indices.size(), features.size());
    for (std::size_t i = 0; i < row_indices.size(); ++i)
      for (std::size_t j = 0; j < features.size(); ++j) xb(i, j) = v.table.columns[features[j]][row_indices[i]];
    batches->push_back(std::move(xb));
  }
  Matrix out(row_indices.size(), features.size());
  auto ov = out.values();
  for (std::size_t p = 0; p < variants.size(); ++p) {
    const double s = sigma.data()(0, p);
    auto xv = (*batches)[p].values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += s * xv[i];
  }
  return autodiff::make_node(std::move(out), autodiff::OpKind::custom, {sigma}, [batches](autodiff::Node& n) {
    auto& parent = *n.parents[0];
    auto g = n.grad.values();
    for (std::size_t p = 0; p < batches->size(); ++p) {
      auto xv = (*batches)[p].values();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      parent.grad(0, p) += acc;
    }
  });
}

std::size_t chosen_pair(std::span<const double> sigma) {
  if (sigma.empty()) throw Error(ErrorCode::invalid_argument, "chosen_pair: empty distribution");
  return static_cast<std::size_t>(std::max_element(sigma.begin(), sigma.end()) - sigma.begin());
}

CleaningHistory train_cleaning(const data::DatasetBundle& bundle,
                               const std::vector<RepairedVariant>& train_variants,
                               CleaningMixture& mixture, nn::MlpModel& model,
                               const nn::TrainConfig& config, const CleaningOptions& options,
                               const std::vector<RepairedVariant>& val_variants,
                               const nn::StepObserver& observer) {
  config.validate();
  if (train_variants.size() != mixture.pair_count()) {
    throw Error(ErrorCode::invalid_argument, "train_cleaning: " + std::to_string(train_variants.size()) +
                                                 " variants for " + std::to_string(mixture.pair_count()) +
                                                 " pairs");
  }
  for (const auto& v : train_variants) {
    if (v.table.n_rows() != bundle.train.n_rows()) {
      throw Error(ErrorCode::invalid_argument, "train_cleaning: variants are not built over the train split");
    }
  }
  const bool lambda_from_val = options.lambda_batch == LambdaBatchSplit::val;
  if (lambda_from_val && val_variants.size() != mixture.pair_count()) {
    throw Error(ErrorCode::invalid_argument,
                "train_cleaning: lambda batches from the val split need val variants");
  }
  if (val_variants.empty() && bundle.val.missing_count() > 0) {
    throw Error(ErrorCode::invalid_argument,
                "train_cleaning: val split has missing cells but no val variants were given");
  }

  const Matrix y = bundle.train.target_matrix();
  const Matrix val_y = bundle.val.target_matrix();
  const Matrix val_x = val_variants.empty() ? bundle.val.feature_matrix() : Matrix{};
  const auto& lambda_variants = lambda_from_val ? val_variants : train_variants;
  const Matrix& lambda_y = lambda_from_val ? val_y : y;
  std::vector<std::size_t> all_val_rows(bundle.val.n_rows());
  std::iota(all_val_rows.begin(), all_val_rows.end(), std::size_t{0});

  nn::BatchSampler model_batches(bundle.train.n_rows(), config.batch_size, nn::derive_seed(config.seed, 1));
  nn::BatchSampler lambda_batches(lambda_variants.front().table.n_rows(), config.batch_size,
                                  nn::derive_seed(config.seed, 2));
  nn::OptimizerState model_state;
  nn::OptimizerState lambda_state;
  std::vector<double> params = model.flat_parameters();
  std::vector<double> lambdas = mixture.flat_weights();
  const bool learn_lambda = config.lambda_learning_rate > 0.0;

  CleaningHistory history;
  history.initial_sigma = pair_distribution(mixture);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t s = 0; s < model_batches.steps_per_epoch(); ++s) {
      // Batch A: model step with sigma held constant.
      {
        const auto rows = model_batches.next();
        const Value sigma = Value::constant(pair_softmax(mixture).data());
        const Value loss = nn::batch_loss(model.forward(mixed_input(sigma, train_variants, rows)),
                                          gather_rows(y, rows));
        if (!std::isfinite(loss.item())) {
          throw Error(ErrorCode::non_finite, "train_cleaning: non-finite model loss at step " +
                                                 std::to_string(history.steps));
        }
        model.zero_grad();
        autodiff::backward(loss);
        nn::optimizer_step(params, model_state, model.flat_gradients(), config.model_optimizer());
        model.set_flat_parameters(params);
        if (observer) observer(history.steps, model);
      }
      // Batch B: mixture step with the model held constant.
      if (learn_lambda) {
        const auto rows = lambda_batches.next();
        for (auto w : mixture.weights()) w.zero_grad();
        const Value sigma = pair_softmax(mixture);
        const Value loss = nn::batch_loss(model.forward_frozen(mixed_input(sigma, lambda_variants, rows)),
                                          gather_rows(lambda_y, rows));
        if (!std::isfinite(loss.item())) {
          throw Error(ErrorCode::non_finite, "train_cleaning: non-finite mixture loss at step " +
                                                 std::to_string(history.steps));
        }
        autodiff::backward(loss);
        std::vector<double> grad;
        for (const auto& w : mixture.weights()) {
          auto g = w.grad().values();
          grad.insert(grad.end(), g.begin(), g.end());
        }
        nn::optimizer_step(lambdas, lambda_state, grad, config.weight_optimizer());
        mixture.set_flat_weights(lambdas);
      }
      ++history.steps;
    }

    CleaningEpoch record;
    record.epoch = epoch;
    record.sigma = pair_distribution(mixture);
    if (val_variants.empty()) {
      record.val_rmse = nn::rmse(model.predict(val_x), val_y);
    } else {
      const Value sigma = Value::constant(Matrix::row_vector(record.sigma));
      record.val_rmse = nn::rmse(model.predict(mixed_input(sigma, val_variants, all_val_rows).data()), val_y);
    }
    history.epochs.push_back(std::move(record));
  }
  return history;
}

}  // namespace diffml::cleaning
