#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "diffml/error.hpp"
#include "diffml/feature_selection.hpp"
#include "support/random_graphs.hpp"

namespace fs = diffml::feature_selection;
namespace data = diffml::data;
namespace nn = diffml::nn;
namespace ad = diffml::autodiff;
using diffml::Error;
using diffml::Matrix;
using diffml::testing::uniform_matrix;

namespace {

data::DatasetBundle synth_bundle(std::uint64_t seed, std::size_t informative, std::size_t noise,
                                 std::size_t rows = 600) {
  data::SynthSpec spec;
  spec.n_rows = rows;
  spec.n_informative = informative;
  spec.n_noise = noise;
  spec.seed = seed;
  return data::standardize_fit_apply(data::split_bundle(data::synth_make(spec).table, {0.6, 0.2, 0.2}, seed));
}

nn::TrainConfig small_config() {
  nn::TrainConfig c;
  c.hidden_layers = {16, 16};
  c.epochs = 8;
  c.learning_rate = 3e-3;
  c.lambda_learning_rate = 0.05;
  return c;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
// and eigenvectors (as columns of `vectors`).
void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& values,
                  std::vector<std::vector<double>>& vectors) {
  const std::size_t n = a.size();
  vectors.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) vectors[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors[k][p], vkq = vectors[k][q];
          vectors[k][p] = c * vkp - s * vkq;
          vectors[k][q] = s * vkp + c * vkq;
        }
      }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a[i][i];
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

TEST(Gates, ZeroLogitsHalveInput) {
  fs::FeatureGates g(3, 0.0);
  std::mt19937_64 rng(50);
  const Matrix x = uniform_matrix(4, 3, rng);
  const Matrix out = fs::gate_apply(g, ad::Value::constant(x)).data();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out.values()[i], 0.5 * x.values()[i]);
}

TEST(Gates, LargeNegativeLogitSuppresses) {
  fs::FeatureGates g(2);
  g.set_logits(std::vector<double>{-50.0, 2.0});
  const Matrix out = fs::gate_apply(g, ad::Value::constant(Matrix(3, 2, 7.0))).data();
  for (std::size_t r = 0; r < 3; ++r) EXPECT_LT(std::abs(out(r, 0)), 1e-20);
  EXPECT_EQ(g.selected(), std::vector<std::size_t>{1});
}

TEST(Gates, OpenIntervalAndThreshold) {
  fs::FeatureGates g(4);
  g.set_logits(std::vector<double>{-30.0, 0.0, 1e-9, 30.0});
  const auto gates = g.gates();
  for (double v : gates) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(g.selected(), (std::vector<std::size_t>{2, 3}));
  EXPECT_NEAR(fs::FeatureGates(5).gates()[0], 1.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(Gates, LinearInInput) {
  std::mt19937_64 rng(51);
  fs::FeatureGates g(3);
  g.set_logits(std::vector<double>{0.3, -1.2, 2.5});
  const Matrix a = uniform_matrix(5, 3, rng);
  const Matrix b = uniform_matrix(5, 3, rng);
  Matrix combo(5, 3);
  for (std::size_t i = 0; i < combo.size(); ++i) combo.values()[i] = 2.0 * a.values()[i] - 3.0 * b.values()[i];
  const Matrix ga = fs::gate_apply(g, ad::Value::constant(a)).data();
  const Matrix gb = fs::gate_apply(g, ad::Value::constant(b)).data();
  const Matrix gc = fs::gate_apply(g, ad::Value::constant(combo)).data();
  for (std::size_t i = 0; i < gc.size(); ++i)
    EXPECT_NEAR(gc.values()[i], 2.0 * ga.values()[i] - 3.0 * gb.values()[i], 1e-12);
}

TEST(Gates, ShapeMismatchThrows) {
  fs::FeatureGates g(3);
  EXPECT_THROW(fs::gate_apply(g, ad::Value::constant(Matrix(2, 4))), Error);
  EXPECT_THROW(g.set_logits(std::vector<double>{1.0}), Error);
  EXPECT_THROW(fs::FeatureGates(0), Error);
}

TEST(Gates, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(52);
  fs::FeatureGates g(4);
  g.set_logits(std::vector<double>{0.5, -0.7, 1.5, -2.0});
  const Matrix x = uniform_matrix(6, 4, rng);
  const Matrix y = uniform_matrix(6, 1, rng);
  nn::MlpModel m({4, 5, 1}, 3);
  ad::Value xv = ad::Value::parameter(x, "x");
  auto f = [&] { return nn::batch_loss(m.forward(fs::gate_apply(g, xv)), y); };
  std::vector<ad::Value> params{g.lambda(), xv};
  EXPECT_LT(ad::finite_diff_check(f, params).max_rel_error, 1e-4);
}

TEST(Training, FrozenOpenGatesMatchBaseline) {
  const auto b = synth_bundle(1, 3, 3);
  auto config = small_config();
  config.lambda_learning_rate = 0.0;
  fs::FeatureGates g(6, 40.0);
  auto gated = nn::MlpModel::regressor(6, config);
  auto plain = gated;
  const auto h = fs::train_gated(b, g, gated, config);
  const auto hp = nn::train_mlp(plain, b.train.feature_matrix(), b.train.target_matrix(), b.val.feature_matrix(),
                                b.val.target_matrix(), config);
  EXPECT_NEAR(h.epochs.back().val_rmse, hp.val_rmse.back(), 1e-6);
  const auto pa = gated.flat_parameters();
  const auto pb = plain.flat_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa[i], pb[i], 1e-9);
  EXPECT_EQ(g.logits(), std::vector<double>(6, 40.0));
}

TEST(Training, RejectsBadInput) {
  const auto b = synth_bundle(2, 3, 0);
  auto config = small_config();
  fs::FeatureGates wrong(5);
  auto m = nn::MlpModel::regressor(3, config);
  EXPECT_THROW(fs::train_gated(b, wrong, m, config), Error);
  data::DatasetBundle empty = b;
  for (auto* t : {&empty.train, &empty.val}) {
    data::Table only_target;
    only_target.column_names = {"y"};
    only_target.columns = {t->columns.back()};
    *t = only_target;
  }
  fs::FeatureGates g(3);
  EXPECT_THROW(fs::train_gated(empty, g, m, config), Error);
}

TEST(Training, NoiseGatesCloseBelowInformative) {
  int separated = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto b = synth_bundle(seed, 5, 20, 1000);
    nn::TrainConfig config = small_config();
    config.hidden_layers = {32, 32};
    config.epochs = 30;
    config.seed = seed;
    fs::FeatureGates g(25);
    auto m = nn::MlpModel::regressor(25, config);
    const auto h = fs::train_gated(b, g, m, config);
    const auto gates = h.epochs.back().gates;
    const double informative = median({gates.begin(), gates.begin() + 5});
    const double noise = median({gates.begin() + 5, gates.end()});
    if (noise < informative) ++separated;
  }
  EXPECT_EQ(separated, 3);
}

TEST(Training, AlternatingAndL1Options) {
  const auto b = synth_bundle(3, 3, 3);
  auto config = small_config();
  fs::FeatureGates plain(6), alternating(6), sparse(6);
  auto m1 = nn::MlpModel::regressor(6, config);
  auto m2 = m1;
  auto m3 = m1;
  const auto h1 = fs::train_gated(b, plain, m1, config);
  const auto h2 = fs::train_gated(b, alternating, m2, config, {true, 0.0});
  const auto h3 = fs::train_gated(b, sparse, m3, config, {false, 1.0});
  EXPECT_EQ(h1.steps, h2.steps);
  EXPECT_NE(plain.logits(), alternating.logits());
  double mean_plain = 0.0, mean_sparse = 0.0;
  for (std::size_t j = 0; j < 6; ++j) {
    mean_plain += plain.gates()[j];
    mean_sparse += sparse.gates()[j];
  }
  EXPECT_LT(mean_sparse, mean_plain);
  EXPECT_EQ(b.test.reads(), 0u);
}

TEST(Pca, FullBasisReconstructs) {
  std::mt19937_64 rng(60);
  const Matrix x = uniform_matrix(30, 5, rng);
  const auto p = fs::PcaModel::fit(x, 5);
  const Matrix back = p.inverse_transform(p.transform(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back.values()[i], x.values()[i], 1e-8);
  EXPECT_NEAR(p.explained_variance_ratio(), 1.0, 1e-10);
}

TEST(Pca, LineIsRankOne) {
  Matrix x(20, 2);
  for (std::size_t r = 0; r < 20; ++r) {
    x(r, 0) = static_cast<double>(r);
    x(r, 1) = 3.0 * static_cast<double>(r) + 1.0;
  }
  const auto p = fs::PcaModel::fit(x, 1);
  EXPECT_NEAR(p.explained_variance_ratio(), 1.0, 1e-12);
}

TEST(Pca, ComponentsAreOrthonormal) {
  std::mt19937_64 rng(61);
  const auto p = fs::PcaModel::fit(uniform_matrix(40, 7, rng), 4);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 7; ++j) dot += p.components(a, j) * p.components(b, j);
      EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-8);
    }
}

TEST(Pca, MatchesJacobiOracle) {
  std::mt19937_64 rng(62);
  const Matrix x = uniform_matrix(50, 6, rng);
  std::vector<double> mean(6, 0.0);
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t j = 0; j < 6; ++j) mean[j] += x(r, j) / 50.0;
  std::vector<std::vector<double>> cov(6, std::vector<double>(6, 0.0));
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) cov[i][j] += (x(r, i) - mean[i]) * (x(r, j) - mean[j]) / 49.0;
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
  jacobi_eigen(cov, values, vectors);
  std::vector<std::size_t> order{0, 1, 2, 3, 4, 5};
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] > values[b]; });

  const std::size_t k = 3;
  const auto p = fs::PcaModel::fit(x, k);
  const Matrix z = p.transform(x);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t e = order[c];
    EXPECT_NEAR(p.explained_variance[c], values[e], 1e-8);
    // Align sign on the component's first large entry.
    double dot = 0.0;
    for (std::size_t j = 0; j < 6; ++j) dot += p.components(c, j) * vectors[j][e];
    const double sign = dot >= 0 ? 1.0 : -1.0;
    for (std::size_t r = 0; r < 50; ++r) {
      double proj = 0.0;
      for (std::size_t j = 0; j < 6; ++j) proj += (x(r, j) - mean[j]) * vectors[j][e];
      EXPECT_NEAR(z(r, c), sign * proj, 1e-6);
    }
  }
}

TEST(Pca, Errors) {
  std::mt19937_64 rng(63);
  const Matrix x = uniform_matrix(10, 3, rng);
  EXPECT_THROW(fs::PcaModel::fit(x, 4), Error);
  EXPECT_THROW(fs::PcaModel::fit(x, 0), Error);
}

TEST(Pca, BundleProjectionKeepsTestSealed) {
  const auto b = synth_bundle(4, 3, 2);
  const auto pb = fs::pca_fit_transform(b, 2);
  EXPECT_EQ(pb.bundle.train.n_features(), 2u);
  EXPECT_EQ(pb.bundle.train.column_names, (std::vector<std::string>{"pc0", "pc1", "y"}));
  EXPECT_EQ(pb.bundle.test.n_rows(), b.test.n_rows());
  EXPECT_EQ(pb.bundle.test.reads(), 0u);
  EXPECT_EQ(b.test.reads(), 0u);
  EXPECT_EQ(pb.bundle.train.columns.back(), b.train.columns.back());
}

TEST(Grid, DefaultGrid) {
  const auto ks = fs::default_k_grid(25);
  ASSERT_EQ(ks.size(), 15u);
  EXPECT_EQ(ks.front(), 1u);
  EXPECT_EQ(ks.back(), 25u);
  EXPECT_TRUE(std::is_sorted(ks.begin(), ks.end()));
  EXPECT_EQ(std::adjacent_find(ks.begin(), ks.end()), ks.end());
  EXPECT_EQ(fs::default_k_grid(4), (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(Grid, FifteenCellsFifteenPipelines) {
  const auto b = synth_bundle(5, 5, 20, 300);
  auto config = small_config();
  config.epochs = 2;
  const auto r = fs::run_pca_grid(b, fs::default_k_grid(25), config);
  ASSERT_EQ(r.cells.size(), 15u);
  EXPECT_EQ(r.pipelines_trained, 15u);
  EXPECT_EQ(r.test_reads, 15u);
  EXPECT_FALSE(r.timed_out);
  for (const auto& c : r.cells) {
    EXPECT_EQ(c.status, "ok");
    EXPECT_TRUE(c.val_rmse && c.test_rmse);
  }
}

TEST(Grid, ZeroBudgetTimesOutEveryCell) {
  const auto b = synth_bundle(6, 3, 2, 200);
  const auto r = fs::run_pca_grid(b, {1, 2, 3}, small_config(), 0.0);
  EXPECT_TRUE(r.timed_out);
  EXPECT_EQ(r.pipelines_trained, 0u);
  EXPECT_EQ(r.test_reads, 0u);
  for (const auto& c : r.cells) {
    EXPECT_EQ(c.status, "timeout");
    EXPECT_FALSE(c.test_rmse);
  }
}

TEST(Grid, FullRankCellTracksNoSelection) {
  double total_gap = 0.0;
  const int seeds = 3;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto b = synth_bundle(seed, 5, 3, 1000);
    auto config = small_config();
    config.epochs = 30;
    config.seed = seed;
    const auto grid = fs::run_pca_grid(b, {8}, config);
    auto m = nn::MlpModel::regressor(8, config);
    nn::train_mlp(m, b.train.feature_matrix(), b.train.target_matrix(), b.val.feature_matrix(),
                  b.val.target_matrix(), config);
    const auto& test = b.test.open();
    const double plain = nn::rmse(m.predict(test.feature_matrix()), test.target_matrix());
    total_gap += std::abs(*grid.cells[0].test_rmse - plain);
  }
  EXPECT_LT(total_gap / seeds, 0.05);
}
