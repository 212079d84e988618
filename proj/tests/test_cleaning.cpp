#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "diffml/cleaning.hpp"
#include "diffml/error.hpp"
#include "support/oracles.hpp"

namespace cl = diffml::cleaning;
namespace data = diffml::data;
namespace nn = diffml::nn;
namespace ad = diffml::autodiff;
using diffml::Error;
using diffml::Matrix;

namespace {

data::Table column_table(std::vector<std::vector<double>> columns) {
  data::Table t;
  for (std::size_t c = 0; c < columns.size(); ++c) t.column_names.push_back("c" + std::to_string(c));
  t.column_names.back() = "y";
  t.columns = std::move(columns);
  t.target_column = t.columns.size() - 1;
  return t;
}

const std::vector<cl::Detector> kDetectors{cl::MissingValueDetector{}, cl::ZScoreDetector{},
                                           cl::HistogramDetector{}};
const std::vector<cl::Repair> kRepairs{cl::MeanImpute{}, cl::KnnImpute{}};

// Small corrupted, standardized bundle.
data::DatasetBundle dirty_bundle(std::uint64_t seed, std::size_t rows = 200) {
  data::SynthSpec spec;
  spec.n_rows = rows;
  spec.n_informative = 4;
  spec.seed = seed;
  auto b = data::split_bundle(data::synth_make(spec).table, {0.6, 0.2, 0.2}, seed);
  b.train = data::inject_errors(b.train, {data::ErrorKind::missing, 0.1, seed}).table;
  return data::standardize_fit_apply(std::move(b));
}

nn::TrainConfig small_config() {
  nn::TrainConfig c;
  c.hidden_layers = {8};
  c.epochs = 4;
  c.batch_size = 16;
  c.learning_rate = 1e-2;
  c.lambda_learning_rate = 0.1;
  return c;
}

}  // namespace

TEST(Detect, MissingValueOnCleanTableFlagsNothing) {
  const auto t = column_table({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(cl::detect(cl::MissingValueDetector{}, t).count(), 0u);
}

TEST(Detect, MissingValueFlagsExactlyMissing) {
  auto t = column_table({{1, 2, 3}, {4, 5, 6}, {0, 0, 0}});
  t.set_missing(1, 0);
  t.set_missing(2, 1);
  EXPECT_EQ(cl::detect(cl::MissingValueDetector{}, t), t.missing_mask());
}

TEST(Detect, ZScoreFlagsOnlyTheSpike) {
  const auto t = column_table({{0, 0, 0, 0, 100}, {1, 2, 3, 4, 5}});
  const auto mask = cl::detect(cl::ZScoreDetector{3.0}, t);
  EXPECT_EQ(mask.count(), 1u);
  EXPECT_TRUE(mask(4, 0));
}

TEST(Detect, ZScoreIgnoresTarget) {
  const auto t = column_table({{1, 2, 3, 4, 5}, {0, 0, 0, 0, 1000}});
  EXPECT_EQ(cl::detect(cl::ZScoreDetector{3.0}, t).count(), 0u);
}

TEST(Detect, HistogramOnUniformColumnFlagsNothing) {
  std::vector<double> col(200);
  std::iota(col.begin(), col.end(), 0.0);
  const auto t = column_table({col, col});
  EXPECT_EQ(cl::detect(cl::HistogramDetector{20, 0.05}, t).count(), 0u);
}

TEST(Detect, HistogramFlagsIsolatedValue) {
  std::vector<double> col(100, 1.0);
  for (std::size_t i = 0; i < 100; ++i) col[i] = static_cast<double>(i % 10);
  col[50] = 1000.0;
  const auto t = column_table({col, col});
  const auto mask = cl::detect(cl::HistogramDetector{20, 0.05}, t);
  EXPECT_TRUE(mask(50, 0));
}

TEST(Detect, Validation) {
  EXPECT_THROW(cl::validate(cl::Detector{cl::ZScoreDetector{0.0}}), Error);
  EXPECT_THROW(cl::validate(cl::Detector{cl::HistogramDetector{10, 1.5}}), Error);
  EXPECT_THROW(cl::validate(cl::Repair{cl::KnnImpute{0}}), Error);
}

TEST(Repair, EmptyMaskIsIdentity) {
  const auto t = column_table({{1, 2, 3}, {4, 5, 6}});
  const data::CellMask none(3, 2);
  for (const auto& r : kRepairs) EXPECT_EQ(cl::repair(r, t, none).columns, t.columns);
}

TEST(Repair, MeanAndMedian) {
  auto t = column_table({{1, 2, 0, 10}, {1, 1, 1, 1}});
  t.set_missing(2, 0);
  const auto mask = t.missing_mask();
  EXPECT_DOUBLE_EQ(cl::repair(cl::MeanImpute{}, t, mask).at(2, 0), 13.0 / 3.0);
  EXPECT_DOUBLE_EQ(cl::repair(cl::MedianImpute{}, t, mask).at(2, 0), 2.0);
  auto small = column_table({{1, 2, 0}, {1, 1, 1}});
  small.set_missing(2, 0);
  EXPECT_DOUBLE_EQ(cl::repair(cl::MeanImpute{}, small, small.missing_mask()).at(2, 0), 1.5);
}

TEST(Repair, KnnNearestNeighbourExample) {
  auto t = column_table({{0, 0.1, 5}, {10, 20, 0}, {0, 0, 0}});
  t.set_missing(2, 1);
  const auto out = cl::repair(cl::KnnImpute{1}, t, t.missing_mask());
  EXPECT_EQ(out.at(2, 1), 20.0);
  EXPECT_EQ(out.at(0, 1), 10.0);
}

TEST(Repair, FullyFlaggedColumnFallsBackToZeroWithWarning) {
  auto t = column_table({{1, 2, 3}, {1, 2, 3}});
  data::CellMask mask(3, 2);
  for (std::size_t r = 0; r < 3; ++r) mask.set(r, 0);
  std::vector<std::string> warnings;
  for (const auto& r : kRepairs) {
    const auto out = cl::repair(r, t, mask, &warnings);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out.at(i, 0), 0.0);
  }
  EXPECT_FALSE(warnings.empty());
}

TEST(Repair, KnnMatchesExhaustiveSearch) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const auto kt = diffml::testing::random_knn_trial(rng);
    const auto& t = kt.table;
    const auto out = cl::repair(cl::KnnImpute{static_cast<int>(kt.k)}, t, kt.mask);
    const std::size_t feats = t.n_features();
    for (std::size_t r = 0; r < t.n_rows(); ++r)
      for (std::size_t c = 0; c < feats; ++c) {
        if (!kt.mask(r, c)) {
          EXPECT_EQ(out.at(r, c), t.at(r, c));
          continue;
        }
        // Rows with every feature flagged use the column mean instead.
        bool any_unflagged = false;
        for (std::size_t f = 0; f < feats; ++f) any_unflagged |= f != c && !kt.mask(r, f);
        if (!any_unflagged) continue;
        EXPECT_EQ(out.at(r, c), diffml::testing::knn_oracle(t, kt.mask, r, c, kt.k)) << "trial " << trial;
      }
  }
}

TEST(Variants, Counts) {
  const auto b = dirty_bundle(1);
  EXPECT_EQ(cl::build_variants(b.train, {kDetectors[0]}, {kRepairs[0]}).size(), 1u);
  const auto v = cl::build_variants(b.train, kDetectors, kRepairs);
  ASSERT_EQ(v.size(), 6u);
  EXPECT_EQ(v[3].detector_idx, 1u);
  EXPECT_EQ(v[3].repair_idx, 1u);
  for (const auto& variant : v) {
    EXPECT_EQ(variant.table.n_rows(), b.train.n_rows());
    EXPECT_EQ(variant.table.column_names, b.train.column_names);
    EXPECT_EQ(variant.table.missing_count(), 0u);
  }
  EXPECT_THROW(cl::build_variants(b.train, {}, kRepairs), Error);
}

TEST(Variants, CleanTableGivesIdenticalVariants) {
  const auto t = column_table({{1, 2, 3, 4}, {2, 3, 4, 5}, {1, 1, 2, 2}});
  for (const auto& v : cl::build_variants(t, {kDetectors[0]}, kRepairs)) EXPECT_EQ(v.table.columns, t.columns);
}

TEST(Mixture, UniformAtZero) {
  cl::CleaningMixture m({kDetectors[0], kDetectors[1]}, kRepairs);
  for (double s : cl::pair_distribution(m)) EXPECT_DOUBLE_EQ(s, 0.25);
}

TEST(Mixture, LargeDetectorLogitConcentratesMass) {
  cl::CleaningMixture m({kDetectors[0], kDetectors[1]}, kRepairs);
  auto flat = m.flat_weights();
  flat[1] = 50.0;  // lambda_d for the second detector
  flat[2] = 1.0;   // lambda_r for the first repair
  m.set_flat_weights(flat);
  const auto sigma = cl::pair_distribution(m);
  EXPECT_NEAR(sigma[2] + sigma[3], 1.0, 1e-12);
  const double e = std::exp(1.0);
  EXPECT_NEAR(sigma[2], e / (e + 1.0), 1e-12);
  EXPECT_NEAR(std::accumulate(sigma.begin(), sigma.end(), 0.0), 1.0, 1e-12);
}

TEST(Mixture, SoftmaxGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(33);
  cl::CleaningMixture m(kDetectors, kRepairs);
  auto flat = m.flat_weights();
  for (double& v : flat) v = std::uniform_real_distribution<double>(-2, 2)(rng);
  m.set_flat_weights(flat);
  const Matrix w = diffml::testing::uniform_matrix(1, 6, rng);
  auto f = [&] { return ad::mean(ad::elementwise_mul(cl::pair_softmax(m), ad::Value::constant(w))); };
  auto params = m.weights();
  EXPECT_LT(ad::finite_diff_check(f, params).max_rel_error, 1e-5);
}

TEST(Mixture, FreePairWeights) {
  cl::CleaningMixture m(kDetectors, kRepairs, true);
  EXPECT_EQ(m.flat_weights().size(), 6u);
  auto flat = m.flat_weights();
  flat[4] = 3.0;
  m.set_flat_weights(flat);
  EXPECT_EQ(cl::chosen_pair(cl::pair_distribution(m)), 4u);
}

TEST(Mixture, PinOneHot) {
  cl::CleaningMixture m(kDetectors, kRepairs);
  m.pin_one_hot(3);
  const auto sigma = cl::pair_distribution(m);
  for (std::size_t p = 0; p < 6; ++p) EXPECT_EQ(sigma[p], p == 3 ? 1.0 : 0.0);
  EXPECT_EQ(cl::chosen_pair(std::vector<double>{0.3, 0.3, 0.2}), 0u);
}

TEST(MixedInput, Examples) {
  const auto a = column_table({{2, 1}, {0, 0}});
  const auto b = column_table({{4, 1}, {0, 0}});
  const std::vector<cl::RepairedVariant> v{{0, 0, a}, {0, 1, b}};
  const std::vector<std::size_t> rows{0, 1};
  const auto half = cl::mixed_input(ad::Value::constant(Matrix::from_rows({{0.5, 0.5}})), v, rows);
  EXPECT_EQ(half.data(), Matrix::from_rows({{3}, {1}}));
  const auto hot = cl::mixed_input(ad::Value::constant(Matrix::from_rows({{0.0, 1.0}})), v, rows);
  EXPECT_EQ(hot.data(), b.feature_matrix());
  const std::vector<cl::RepairedVariant> same{{0, 0, a}, {0, 1, a}};
  const auto any = cl::mixed_input(ad::Value::constant(Matrix::from_rows({{0.3, 0.7}})), same, rows);
  EXPECT_EQ(any.data(), a.feature_matrix());
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(cl::mixed_input(ad::Value::constant(Matrix::from_rows({{0.5, 0.5}})), v, bad), Error);
}

TEST(MixedInput, StaysInsideVariantEnvelope) {
  const auto b = dirty_bundle(2);
  const auto v = cl::build_variants(b.train, kDetectors, kRepairs);
  cl::CleaningMixture m(kDetectors, kRepairs);
  auto flat = m.flat_weights();
  flat = {0.3, -1.0, 2.0, 0.5, -0.5};
  m.set_flat_weights(flat);
  std::vector<std::size_t> rows(b.train.n_rows());
  std::iota(rows.begin(), rows.end(), 0);
  const Matrix x = cl::mixed_input(cl::pair_softmax(m), v, rows).data();
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const auto& variant : v) {
        lo = std::min(lo, variant.table.at(r, c));
        hi = std::max(hi, variant.table.at(r, c));
      }
      EXPECT_GE(x(r, c), lo - 1e-12);
      EXPECT_LE(x(r, c), hi + 1e-12);
    }
}

TEST(MixedInput, GradientMatchesFiniteDifferences) {
  const auto b = dirty_bundle(3, 60);
  const auto v = cl::build_variants(b.train, kDetectors, kRepairs);
  cl::CleaningMixture m(kDetectors, kRepairs);
  m.set_flat_weights(std::vector<double>{0.2, -0.4, 0.1, 0.3, -0.2});
  nn::MlpModel model({b.train.n_features(), 6, 1}, 5);
  const std::vector<std::size_t> rows{0, 3, 7, 11, 20};
  const Matrix y = diffml::gather_rows(b.train.target_matrix(), rows);
  auto f = [&] { return nn::batch_loss(model.forward_frozen(cl::mixed_input(cl::pair_softmax(m), v, rows)), y); };
  auto params = m.weights();
  EXPECT_LT(ad::finite_diff_check(f, params).max_rel_error, 1e-4);
}

TEST(Training, OneHotMixtureMatchesBaselineBitwise) {
  const auto b = dirty_bundle(4);
  const auto v = cl::build_variants(b.train, kDetectors, kRepairs);
  auto config = small_config();
  config.lambda_learning_rate = 0.0;
  for (std::size_t pair : {0u, 5u}) {
    cl::CleaningMixture m(kDetectors, kRepairs);
    m.pin_one_hot(pair);
    auto learned = nn::MlpModel::regressor(b.train.n_features(), config);
    auto baseline = learned;
    const auto h = cl::train_cleaning(b, v, m, learned, config);
    const auto hb = nn::train_mlp(baseline, v[pair].table.feature_matrix(), v[pair].table.target_matrix(),
                                  b.val.feature_matrix(), b.val.target_matrix(), config);
    EXPECT_EQ(learned.flat_parameters(), baseline.flat_parameters());
    EXPECT_EQ(h.steps, hb.steps);
    ASSERT_EQ(h.epochs.size(), hb.val_rmse.size());
    for (std::size_t e = 0; e < h.epochs.size(); ++e) EXPECT_EQ(h.epochs[e].val_rmse, hb.val_rmse[e]);
  }
}

TEST(Training, SinglePairReducesToBaseline) {
  const auto b = dirty_bundle(5);
  const auto v = cl::build_variants(b.train, {kDetectors[0]}, {kRepairs[1]});
  auto config = small_config();
  cl::CleaningMixture m({kDetectors[0]}, {kRepairs[1]});
  auto learned = nn::MlpModel::regressor(b.train.n_features(), config);
  auto baseline = learned;
  cl::train_cleaning(b, v, m, learned, config);
  nn::train_mlp(baseline, v[0].table.feature_matrix(), v[0].table.target_matrix(), b.val.feature_matrix(),
                b.val.target_matrix(), config);
  EXPECT_EQ(learned.flat_parameters(), baseline.flat_parameters());
}

TEST(Training, FrozenUniformEqualsAveragedTable) {
  const auto b = dirty_bundle(6);
  const auto v = cl::build_variants(b.train, {kDetectors[0]}, kRepairs);
  auto config = small_config();
  config.lambda_learning_rate = 0.0;
  cl::CleaningMixture m({kDetectors[0]}, kRepairs);
  auto learned = nn::MlpModel::regressor(b.train.n_features(), config);
  auto baseline = learned;
  cl::train_cleaning(b, v, m, learned, config);
  Matrix avg = v[0].table.feature_matrix();
  const Matrix other = v[1].table.feature_matrix();
  for (std::size_t i = 0; i < avg.size(); ++i) avg.values()[i] = 0.5 * avg.values()[i] + 0.5 * other.values()[i];
  nn::train_mlp(baseline, avg, v[0].table.target_matrix(), b.val.feature_matrix(), b.val.target_matrix(), config);
  const auto pa = learned.flat_parameters();
  const auto pb = baseline.flat_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa[i], pb[i], 1e-9);
}

TEST(Training, SigmaStaysAProbabilityVector) {
  const auto b = dirty_bundle(7);
  const auto v = cl::build_variants(b.train, kDetectors, kRepairs);
  auto config = small_config();
  config.lambda_learning_rate = 0.5;
  cl::CleaningMixture m(kDetectors, kRepairs);
  auto model = nn::MlpModel::regressor(b.train.n_features(), config);
  const auto h = cl::train_cleaning(b, v, m, model, config);
  ASSERT_EQ(h.epochs.size(), config.epochs);
  for (const auto& e : h.epochs) {
    double sum = 0.0;
    for (double s : e.sigma) {
      EXPECT_GE(s, 0.0);
      sum += s;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  EXPECT_EQ(b.test.reads(), 0u);
}

TEST(Training, MissingValueDetectorGainsMass) {
  int gained = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    data::SynthSpec spec;
    spec.n_rows = 600;
    spec.n_informative = 5;
    spec.seed = seed;
    auto b = data::split_bundle(data::synth_make(spec).table, {0.6, 0.2, 0.2}, seed);
    // The dirty encoding of a missing cell is a raw zero.
    b.train = data::inject_errors(b.train, {data::ErrorKind::missing, 0.1, seed}).table;
    b = data::standardize_fit_apply(std::move(b));
    std::vector<double> fill;
    for (std::size_t c = 0; c < b.train.n_cols(); ++c) fill.push_back(b.standardizer.apply_value(c, 0.0));
    const auto v = cl::build_variants(b.train, kDetectors, kRepairs, {fill});
    nn::TrainConfig config;
    config.epochs = 10;
    config.learning_rate = 3e-3;
    config.lambda_learning_rate = 0.1;
    config.seed = seed;
    cl::CleaningMixture m(kDetectors, kRepairs);
    auto model = nn::MlpModel::regressor(b.train.n_features(), config);
    const auto h = cl::train_cleaning(b, v, m, model, config);
    const double before = h.initial_sigma[0] + h.initial_sigma[1];
    const double after = h.epochs.back().sigma[0] + h.epochs.back().sigma[1];
    if (after > before) ++gained;
  }
  EXPECT_EQ(gained, 3);
}

TEST(Training, RejectsMismatchedVariants) {
  const auto b = dirty_bundle(8);
  const auto v = cl::build_variants(b.train, {kDetectors[0]}, kRepairs);
  cl::CleaningMixture m(kDetectors, kRepairs);
  auto model = nn::MlpModel::regressor(b.train.n_features(), small_config());
  EXPECT_THROW(cl::train_cleaning(b, v, m, model, small_config()), Error);
  cl::CleaningOptions val_lambda{cl::LambdaBatchSplit::val};
  cl::CleaningMixture m2({kDetectors[0]}, kRepairs);
  EXPECT_THROW(cl::train_cleaning(b, v, m2, model, small_config(), val_lambda), Error);
}
