#include <cmath>

#include <nlohmann/json.hpp>

#include "deformcast/lasso.hpp"
#include "test_util.hpp"

using namespace deformcast;
using namespace deformcast::tabular;

namespace {

// y = 3x + 1 exactly, so the standardized correlation c is 1.
TabularDataset perfect_line(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  TabularDataset d;
  d.x.resize(static_cast<Eigen::Index>(n), 1);
  d.y.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < d.x.rows(); ++i) {
    d.x(i, 0) = nd(rng);
    d.y(i) = 3.0 * d.x(i, 0) + 1.0;
  }
  d.feature_names = {"t-1"};
  return d;
}

TabularDataset three_feature_toy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  TabularDataset d;
  d.x.resize(200, 3);
  d.y.resize(200);
  for (Eigen::Index i = 0; i < 200; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) d.x(i, j) = nd(rng) * static_cast<double>(j + 1) + static_cast<double>(j);
    d.y(i) = 1.5 * d.x(i, 0) - 2.0 * d.x(i, 1) + 0.3 * d.x(i, 2) + 4.0 + 0.5 * nd(rng);
  }
  d.feature_names = {"t-3", "t-2", "t-1"};
  return d;
}

// Normal equations on [X 1].
Vector ols(const TabularDataset& d) {
  Matrix a(d.x.rows(), d.x.cols() + 1);
  a << d.x, Vector::Ones(d.x.rows());
  return (a.transpose() * a).ldlt().solve(a.transpose() * d.y);
}

double train_mse(const LinearModel& m, const TabularDataset& d) {
  return (lasso_predict(m, d.x) - d.y).squaredNorm() / static_cast<double>(d.rows());
}

}  // namespace

TEST(LassoConfig, Validation) {
  LassoConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = -0.1;
  EXPECT_DC_ERROR(c.validate(), ErrorCode::InvalidConfig);
  c = LassoConfig{};
  c.learning_rate = 0.0;
  EXPECT_DC_ERROR(c.validate(), ErrorCode::InvalidConfig);
}

TEST(LassoTrain, SoftThresholdInterior) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    LassoConfig c;
    c.alpha = 0.4;
    const auto m = lasso_train(perfect_line(200, seed), c);
    EXPECT_NEAR(m.weights[0], 0.8, 1e-3);
  }
}

TEST(LassoTrain, SoftThresholdZeroRegion) {
  for (double alpha : {2.0, 2.5, 5.0}) {
    LassoConfig c;
    c.alpha = alpha;
    const auto m = lasso_train(perfect_line(200, 4), c);
    EXPECT_NEAR(m.weights[0], 0.0, 1e-3) << "alpha " << alpha;
  }
}

TEST(LassoTrain, ZeroAlphaMatchesNormalEquations) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto d = three_feature_toy(seed);
    const Vector beta = ols(d);
    LassoConfig c;
    c.alpha = 0.0;
    c.seed = seed;
    const auto m = lasso_train(d, c);
    const auto w = m.raw_weights();
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(w[static_cast<std::size_t>(j)], beta(j), 1e-4);
    EXPECT_NEAR(m.raw_intercept(), beta(3), 1e-4);

    Matrix a(200, 4);
    a << d.x, Vector::Ones(200);
    const double ols_mse = (a * beta - d.y).squaredNorm() / 200.0;
    EXPECT_LE(train_mse(m, d), ols_mse + 1e-6);
  }
}

TEST(LassoTrain, ObjectiveNonIncreasingAfterBurnIn) {
  // Problems whose optimum has no zero weight. A weight whose optimum is 0
  // keeps flipping sign under the sign(0) = 0 subgradient; see the next test.
  const auto check = [](const TabularDataset& d, double alpha, std::uint64_t seed) {
    LassoConfig c;
    c.alpha = alpha;
    c.seed = seed;
    LassoHistory h;
    (void)lasso_train(d, c, &h);
    ASSERT_EQ(h.objective.size(), c.epochs);
    for (std::size_t e = 11; e < h.objective.size(); ++e) {
      const double prev = h.objective[e - 1];
      // Slack covers rounding in the objective sum only.
      EXPECT_LE(h.objective[e], prev + 1e-12 * (1.0 + std::abs(prev)))
          << "seed " << seed << " alpha " << alpha << " epoch " << e;
    }
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (double alpha : {0.0, 0.01, 0.05}) check(three_feature_toy(seed + 10), alpha, seed);
    for (double alpha : {0.0, 0.4, 1.0}) check(perfect_line(200, seed), alpha, seed);
  }
}

TEST(LassoTrain, ZeroRegionWeightStaysNearZero) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    LassoConfig c;
    c.alpha = 3.0;
    c.seed = seed;
    LassoHistory h;
    const auto m = lasso_train(perfect_line(200, seed), c, &h);
    EXPECT_NEAR(m.weights[0], 0.0, 1e-3);
    // objective at w = 0, b = 0 is 1 (unit-variance standardized target)
    EXPECT_NEAR(h.objective.back(), 1.0, 1e-3);
  }
}

TEST(LassoTrain, AffineFeatureRescalingLeavesPredictionsUnchanged) {
  const auto d = three_feature_toy(6);
  auto scaled = d;
  scaled.x = (10.0 * d.x.array() + 3.0).matrix();
  LassoConfig c;
  const auto a = lasso_train(d, c);
  const auto b = lasso_train(scaled, c);
  const Vector pa = lasso_predict(a, d.x);
  const Vector pb = lasso_predict(b, scaled.x);
  for (Eigen::Index i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa(i), pb(i), 1e-9);
}

TEST(LassoTrain, ConstantColumnGetsUnitStdAndZeroWeight) {
  auto d = three_feature_toy(7);
  d.x.col(1).setConstant(5.0);
  const auto m = lasso_train(d, LassoConfig{});
  EXPECT_EQ(m.feature_stds[1], 1.0);
  EXPECT_EQ(m.weights[1], 0.0);
  EXPECT_EQ(m.feature_means[1], 5.0);
}

TEST(LassoTrain, DeterministicForSeed) {
  const auto d = three_feature_toy(8);
  LassoConfig c;
  c.epochs = 200;
  const auto a = lasso_train(d, c);
  const auto b = lasso_train(d, c);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.bias, b.bias);
}

TEST(LassoPredict, Examples) {
  LinearModel m;
  m.weights = {0.0, 0.0};
  m.feature_means = {1.0, 2.0};
  m.feature_stds = {1.0, 3.0};
  m.target_mean = 4.5;
  m.target_std = 2.0;
  Matrix x(2, 2);
  x << 0, 0, 7, -3;
  EXPECT_EQ(lasso_predict(m, x), Vector::Constant(2, 4.5));

  LinearModel id;
  id.weights = {1.0};
  id.feature_means = {0.0};
  id.feature_stds = {1.0};
  Matrix x1(3, 1);
  x1 << -2, 0.5, 9;
  EXPECT_EQ(lasso_predict(id, x1), Vector(x1.col(0)));
  EXPECT_DC_ERROR((void)lasso_predict(id, x), ErrorCode::FeatureCountMismatch);
}

TEST(LassoPersistence, JsonRoundTrip) {
  const auto d = three_feature_toy(9);
  LassoConfig c;
  c.epochs = 300;
  const auto m = lasso_train(d, c);
  const auto dir = testutil::scratch_dir("lasso");
  save_linear_model(m, dir / "m.json");
  const auto back = load_linear_model(dir / "m.json");
  EXPECT_EQ(back.weights, m.weights);
  EXPECT_EQ(back.feature_stds, m.feature_stds);
  EXPECT_EQ(back.feature_names, m.feature_names);
  EXPECT_EQ(lasso_predict(back, d.x), lasso_predict(m, d.x));

  nlohmann::json j = m;
  j["feature_stds"][0] = 0.0;
  std::ofstream(dir / "bad.json") << j.dump();
  EXPECT_DC_ERROR((void)load_linear_model(dir / "bad.json"), ErrorCode::FormatError);
}
