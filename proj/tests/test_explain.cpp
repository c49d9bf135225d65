#include <cmath>
#include <numeric>

#include "deformcast/explain.hpp"
#include "test_util.hpp"

using namespace deformcast;
using namespace deformcast::explain;
using tabular::DecisionTree;
using tabular::TreeNode;

namespace {

constexpr int kLeaf = TreeNode::kLeaf;

TreeNode leaf(double value, double cover) { return {kLeaf, 0.0, 0, 0, value, cover}; }
TreeNode split(int feature, double thr, std::size_t l, std::size_t r, double cover) {
  return {feature, thr, l, r, 0.0, cover};
}

TreeEnsemble ensemble_of(std::vector<DecisionTree> trees, std::size_t features, double base = 0.0, double lr = 1.0) {
  TreeEnsemble m;
  m.base_score = base;
  m.learning_rate = lr;
  m.feature_count = features;
  m.feature_names = tabular::lag_feature_names(features);
  m.trees = std::move(trees);
  return m;
}

// Test-side coalition value: known features follow the row, unknown ones
// average both children by cover.
double oracle_tree_value(const DecisionTree& t, std::size_t k, const std::vector<double>& row, unsigned mask) {
  const auto& n = t.nodes[k];
  if (n.is_leaf()) return n.leaf_value;
  const auto f = static_cast<unsigned>(n.feature_index);
  if (mask & (1u << f)) return oracle_tree_value(t, row[f] <= n.threshold ? n.left : n.right, row, mask);
  return (t.nodes[n.left].cover * oracle_tree_value(t, n.left, row, mask) +
          t.nodes[n.right].cover * oracle_tree_value(t, n.right, row, mask)) /
         n.cover;
}

double oracle_value(const TreeEnsemble& m, const std::vector<double>& row, unsigned mask) {
  double v = m.base_score;
  for (const auto& t : m.trees) v += m.learning_rate * oracle_tree_value(t, 0, row, mask);
  return v;
}

// Shapley formula over every feature, used or not.
std::vector<double> oracle_shapley(const TreeEnsemble& m, const std::vector<double>& row) {
  const auto n = static_cast<unsigned>(m.feature_count);
  std::vector<double> v(1u << n);
  for (unsigned s = 0; s < v.size(); ++s) v[s] = oracle_value(m, row, s);
  std::vector<double> fact(n + 1, 1.0);
  for (unsigned i = 1; i <= n; ++i) fact[i] = fact[i - 1] * i;
  std::vector<double> phi(n, 0.0);
  for (unsigned i = 0; i < n; ++i) {
    for (unsigned s = 0; s < v.size(); ++s) {
      if (s & (1u << i)) continue;
      const auto size = static_cast<unsigned>(__builtin_popcount(s));
      phi[i] += fact[size] * fact[n - size - 1] / fact[n] * (v[s | (1u << i)] - v[s]);
    }
  }
  return phi;
}

// Random tree with integer covers that add up; depth <= max_depth.
void grow(DecisionTree& t, std::size_t k, std::size_t depth, std::size_t max_depth, std::size_t features,
          std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto cover = static_cast<std::size_t>(t.nodes[k].cover);
  if (depth == max_depth || cover < 2 || std::bernoulli_distribution(0.2)(rng)) {
    t.nodes[k].leaf_value = 5.0 * u(rng);
    return;
  }
  std::uniform_int_distribution<std::size_t> pick_f(0, features - 1), pick_c(1, cover - 1);
  const std::size_t lc = pick_c(rng);
  const std::size_t l = t.nodes.size();
  t.nodes.push_back(leaf(0.0, static_cast<double>(lc)));
  t.nodes.push_back(leaf(0.0, static_cast<double>(cover - lc)));
  t.nodes[k].feature_index = static_cast<int>(pick_f(rng));
  t.nodes[k].threshold = u(rng);
  t.nodes[k].left = l;
  t.nodes[k].right = l + 1;
  grow(t, l, depth + 1, max_depth, features, rng);
  grow(t, l + 1, depth + 1, max_depth, features, rng);
}

TreeEnsemble random_ensemble(std::mt19937_64& rng, std::size_t features, std::size_t trees, std::size_t max_depth) {
  std::vector<DecisionTree> ts(trees);
  std::uniform_int_distribution<int> cover(8, 200);
  for (auto& t : ts) {
    t.nodes.push_back(leaf(0.0, cover(rng)));
    grow(t, 0, 0, max_depth, features, rng);
  }
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return ensemble_of(std::move(ts), features, 3.0 * u(rng), 0.1 + 0.9 * (u(rng) + 1.0) / 2.0);
}

std::vector<double> random_row(std::mt19937_64& rng, std::size_t features) {
  return testutil::uniform_values(rng, features, -1.2, 1.2);
}

}  // namespace

TEST(TreeShap, SingleLeafTree) {
  DecisionTree t;
  t.nodes = {leaf(4.0, 10.0)};
  const auto m = ensemble_of({t}, 3, 1.0, 0.5);
  const auto a = tree_shap(m, std::vector<double>{1, 2, 3});
  EXPECT_EQ(a.base_value, 3.0);
  EXPECT_EQ(a.phi, std::vector<double>(3, 0.0));
}

TEST(TreeShap, DepthOneStump) {
  DecisionTree t;
  t.nodes = {split(0, 0.5, 1, 2, 4.0), leaf(10.0, 3.0), leaf(-2.0, 1.0)};
  const auto m = ensemble_of({t}, 1);
  EXPECT_EQ(expected_value(m), 7.0);
  const auto left = tree_shap(m, std::vector<double>{0.0});
  EXPECT_EQ(left.base_value, 7.0);
  EXPECT_EQ(left.phi[0], 3.0);
  EXPECT_EQ(shap_brute_force(m, std::vector<double>{0.0}), left.phi);
  const auto right = tree_shap(m, std::vector<double>{1.0});
  EXPECT_EQ(right.phi[0], -9.0);
  EXPECT_EQ(shap_brute_force(m, std::vector<double>{1.0}), right.phi);
}

TEST(TreeShap, DepthTwoMatchesEnumeration) {
  DecisionTree t;
  t.nodes = {split(0, 0.0, 1, 2, 10.0), split(1, 1.0, 3, 4, 6.0), split(1, -1.0, 5, 6, 4.0),
             leaf(1.0, 2.0),           leaf(5.0, 4.0),           leaf(-3.0, 1.0),
             leaf(8.0, 3.0)};
  const auto m = ensemble_of({t}, 2);
  for (const auto& row : {std::vector<double>{-1, 0}, {-1, 2}, {1, -2}, {1, 0}}) {
    const auto a = tree_shap(m, row);
    const auto o = oracle_shapley(m, row);
    EXPECT_NEAR(a.phi[0], o[0], 1e-9);
    EXPECT_NEAR(a.phi[1], o[1], 1e-9);
    EXPECT_EQ(coalition_value(m, row, {false, false}), a.base_value);
  }
}

TEST(TreeShap, RandomEnsemblesMatchOracles) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> nf(1, 12), nt(1, 5), nd(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t f = nf(rng);
    const auto m = random_ensemble(rng, f, nt(rng), nd(rng));
    const auto row = random_row(rng, f);
    const auto a = tree_shap(m, row);
    const auto brute = shap_brute_force(m, row);
    const auto oracle = oracle_shapley(m, row);
    EXPECT_NEAR(a.base_value, oracle_value(m, row, 0u), 1e-12);
    for (std::size_t j = 0; j < f; ++j) {
      EXPECT_NEAR(a.phi[j], oracle[j], 1e-9) << "trial " << trial << " feature " << j;
      EXPECT_NEAR(brute[j], oracle[j], 1e-9) << "trial " << trial << " feature " << j;
    }
    const double sum = std::accumulate(a.phi.begin(), a.phi.end(), a.base_value);
    EXPECT_NEAR(sum, m.predict_row(row), 1e-9);
  }
}

TEST(TreeShap, UnusedFeatureGetsExactlyZero) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = random_ensemble(rng, 4, 3, 3);
    m.feature_count = 6;  // features 4 and 5 never split
    const auto a = tree_shap(m, random_row(rng, 6));
    EXPECT_EQ(a.phi[4], 0.0);
    EXPECT_EQ(a.phi[5], 0.0);
  }
}

TEST(TreeShap, ExchangeableFeaturesShareCredit) {
  DecisionTree a, b;
  a.nodes = {split(0, 0.3, 1, 2, 9.0), leaf(-1.5, 5.0), leaf(2.5, 4.0)};
  b.nodes = {split(1, 0.3, 1, 2, 9.0), leaf(-1.5, 5.0), leaf(2.5, 4.0)};
  const auto m = ensemble_of({a, b}, 3, 0.7, 0.4);
  for (double v : {0.0, 1.0}) {
    const std::vector<double> row{v, v, 5.0};
    const auto s = tree_shap(m, row);
    EXPECT_NEAR(s.phi[0], s.phi[1], 1e-12);
    const auto brute = shap_brute_force(m, row);
    EXPECT_NEAR(brute[0], brute[1], 1e-12);
  }
}

TEST(BruteForce, SingleFeatureModelAndEmptyCoalition) {
  std::mt19937_64 rng(1);
  const auto m = random_ensemble(rng, 1, 4, 3);
  const std::vector<double> row{0.2};
  const auto phi = shap_brute_force(m, row);
  EXPECT_NEAR(phi[0], m.predict_row(row) - expected_value(m), 1e-12);
  EXPECT_NEAR(coalition_value(m, row, {false}), expected_value(m), 1e-12);
}

TEST(BruteForce, TooManyFeatures) {
  std::vector<DecisionTree> trees;
  for (int f = 0; f < 16; ++f) {
    DecisionTree t;
    t.nodes = {split(f, 0.0, 1, 2, 2.0), leaf(-1.0, 1.0), leaf(1.0, 1.0)};
    trees.push_back(t);
  }
  const auto m = ensemble_of(trees, 16);
  EXPECT_DC_ERROR((void)shap_brute_force(m, std::vector<double>(16, 0.0)), ErrorCode::TooManyFeatures);
  EXPECT_NO_THROW((void)tree_shap(m, std::vector<double>(16, 0.0)));
}

TEST(TreeShap, Errors) {
  DecisionTree t;
  t.nodes = {split(0, 0.0, 1, 2, 1.0), leaf(1.0, 1.0), leaf(2.0, 0.0)};
  const auto m = ensemble_of({t}, 1);
  EXPECT_DC_ERROR((void)tree_shap(m, std::vector<double>{0.0}), ErrorCode::ZeroCover);
  EXPECT_DC_ERROR((void)tree_shap(m, std::vector<double>{0.0, 1.0}), ErrorCode::FeatureCountMismatch);
}

TEST(ExplainRows, TrainedEnsembleLocalAccuracy) {
  std::mt19937_64 rng(31);
  tabular::TabularDataset d;
  d.x.resize(500, 5);
  d.y.resize(500);
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < 500; ++i) {
    for (Eigen::Index j = 0; j < 5; ++j) d.x(i, j) = nd(rng);
    d.y(i) = d.x(i, 4) * 2.0 + std::abs(d.x(i, 1)) + 0.1 * nd(rng);
  }
  d.feature_names = tabular::lag_feature_names(5);
  tabular::GbdtConfig c;
  c.max_rounds = 40;
  c.min_samples_leaf = 5;
  const auto m = tabular::gbdt_train(d, d, c);
  const auto r = explain_rows(m, d.x, 120, 3);
  ASSERT_EQ(r.rows(), 120u);
  EXPECT_TRUE(std::is_sorted(r.row_indices.begin(), r.row_indices.end()));
  const auto pred = tabular::gbdt_predict(m, d.x);
  for (std::size_t i = 0; i < r.rows(); ++i) {
    EXPECT_NEAR(r.prediction(i), pred(static_cast<Eigen::Index>(r.row_indices[i])), 1e-6);
    EXPECT_EQ(r.sample_rows.row(Eigen::Index(i)), d.x.row(Eigen::Index(r.row_indices[i])));
  }
  EXPECT_EQ(explain_rows(m, d.x, 120, 3).row_indices, r.row_indices);
  EXPECT_EQ(explain_rows(m, d.x).rows(), 500u);
  EXPECT_EQ(shap_summary(r).front().feature, "t-1");
}

namespace {

ShapReport hand_report(Matrix phi, std::vector<std::string> names) {
  ShapReport r;
  r.base_value = 1.0;
  r.sample_rows = Matrix::Constant(phi.rows(), phi.cols(), 0.5);
  r.phi = std::move(phi);
  r.feature_names = std::move(names);
  r.row_indices.resize(static_cast<std::size_t>(r.phi.rows()));
  std::iota(r.row_indices.begin(), r.row_indices.end(), std::size_t{0});
  return r;
}

}  // namespace

TEST(ShapSummary, RankingExamples) {
  Matrix phi(2, 2);
  phi << 1.0, -3.0, -1.0, 3.0;
  auto s = shap_summary(hand_report(phi, {"first", "second"}));
  EXPECT_EQ(s[0].feature, "second");
  EXPECT_EQ(s[0].mean_abs_phi, 3.0);
  EXPECT_EQ(s[1].mean_abs_phi, 1.0);
  ASSERT_EQ(s[0].points.size(), 2u);
  EXPECT_EQ(s[0].points[1], (std::pair<double, double>{3.0, 0.5}));

  s = shap_summary(hand_report(Matrix::Zero(3, 3), {"t-3", "t-2", "t-1"}));
  EXPECT_EQ(s[0].feature, "t-3");
  EXPECT_EQ(s[2].feature, "t-1");
  for (const auto& f : s) EXPECT_EQ(f.mean_abs_phi, 0.0);
}

TEST(ForceDecomposition, OrderAndDirections) {
  Matrix phi(1, 2);
  phi << 0.1, -0.3;
  const auto report = hand_report(phi, {"a", "b"});
  const auto f = force_decomposition(report, 0);
  ASSERT_EQ(f.contributions.size(), 2u);
  EXPECT_EQ(f.contributions[0].feature, "b");
  EXPECT_EQ(f.contributions[0].direction, Direction::Decrease);
  EXPECT_EQ(f.contributions[1].feature, "a");
  EXPECT_EQ(f.contributions[1].direction, Direction::Increase);
  EXPECT_NEAR(f.prediction, f.base_value - 0.2, 1e-15);
  EXPECT_STREQ(to_string(Direction::Decrease), "decrease");
  EXPECT_DC_ERROR((void)force_decomposition(report, 1), ErrorCode::IndexOutOfRange);

  const auto zero = force_decomposition(hand_report(Matrix::Zero(1, 2), {"a", "b"}), 0);
  EXPECT_EQ(zero.prediction, zero.base_value);
  EXPECT_EQ(zero.contributions[0].direction, Direction::None);
}

TEST(ShapReportIo, RoundTrip) {
  std::mt19937_64 rng(5);
  Matrix phi(3, 2), rows(3, 2);
  for (Eigen::Index i = 0; i < 3; ++i) {
    for (Eigen::Index j = 0; j < 2; ++j) {
      phi(i, j) = std::uniform_real_distribution<double>(-1, 1)(rng);
      rows(i, j) = std::uniform_real_distribution<double>(-9, 9)(rng);
    }
  }
  auto r = hand_report(phi, {"t-2", "t-1"});
  r.sample_rows = rows;
  r.row_indices = {4, 8, 15};
  r.base_value = -2.768;
  const auto dir = testutil::scratch_dir("shap");
  write_shap_report(r, dir);
  const auto back = read_shap_report(dir);
  EXPECT_EQ(back.base_value, r.base_value);
  EXPECT_EQ(back.phi, r.phi);
  EXPECT_EQ(back.sample_rows, r.sample_rows);
  EXPECT_EQ(back.row_indices, r.row_indices);
  EXPECT_EQ(back.feature_names, r.feature_names);
  EXPECT_TRUE(std::filesystem::exists(dir / "shap_summary.json"));
}
