#include "deformcast/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "deformcast/error.hpp"
#include "deformcast/json_io.hpp"

namespace deformcast::tabular {
namespace {

// Gains within this relative distance count as equal, so the tie-break rule
// decides rather than rounding noise.
constexpr double kTieTolerance = 1e-12;
// A split must remove at least this fraction of the node's sum of squares.
constexpr double kMinRelativeGain = 1e-12;

using Columns = std::vector<std::vector<std::size_t>>;

Columns sort_columns(const Matrix& x) {
  Columns cols(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index f = 0; f < x.cols(); ++f) {
    auto& order = cols[static_cast<std::size_t>(f)];
    order.resize(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return x(static_cast<Eigen::Index>(a), f) < x(static_cast<Eigen::Index>(b), f);
    });
  }
  return cols;
}

struct Candidate {
  double gain{};
  int feature{TreeNode::kLeaf};
  double threshold{};
};

struct Scan {
  double left_sum{};
  std::size_t left_count{};
  double last_value{};
};

double midpoint(double a, double b) {
  const double m = a + (b - a) / 2.0;
  return m < b ? m : a;
}

DecisionTree grow(const Matrix& x, const Columns& sorted, std::span<const double> r, const GbdtConfig& config) {
  const std::size_t n = r.size();
  DecisionTree tree;
  std::vector<std::size_t> node_of(n, 0);
  std::vector<double> sum{std::accumulate(r.begin(), r.end(), 0.0)};
  std::vector<double> sumsq{std::inner_product(r.begin(), r.end(), r.begin(), 0.0)};
  tree.nodes.push_back(TreeNode{TreeNode::kLeaf, 0.0, 0, 0, sum[0] / static_cast<double>(n), static_cast<double>(n)});

  std::vector<std::size_t> frontier{0};
  std::size_t leaves = 1;
  for (std::size_t depth = 0; depth < config.max_depth && !frontier.empty() && leaves < config.num_leaves; ++depth) {
    std::vector<long> slot_of(tree.nodes.size(), -1);
    for (std::size_t s = 0; s < frontier.size(); ++s) slot_of[frontier[s]] = static_cast<long>(s);
    std::vector<Candidate> best(frontier.size());

    for (std::size_t f = 0; f < sorted.size(); ++f) {
      std::vector<Scan> scan(frontier.size());
      for (const std::size_t i : sorted[f]) {
        const long slot = slot_of[node_of[i]];
        if (slot < 0) continue;
        const auto s = static_cast<std::size_t>(slot);
        const std::size_t node = frontier[s];
        const double v = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f));
        Scan& st = scan[s];
        if (st.left_count > 0 && v > st.last_value) {
          const auto total = static_cast<std::size_t>(tree.nodes[node].cover);
          const std::size_t nl = st.left_count, nr = total - nl;
          if (nl >= config.min_samples_leaf && nr >= config.min_samples_leaf) {
            const double sr = sum[node] - st.left_sum;
            const double gain = st.left_sum * st.left_sum / static_cast<double>(nl) +
                                sr * sr / static_cast<double>(nr) -
                                sum[node] * sum[node] / static_cast<double>(total);
            Candidate& b = best[s];
            if (b.feature == TreeNode::kLeaf ||
                gain > b.gain + kTieTolerance * std::max(std::abs(gain), std::abs(b.gain))) {
              b = Candidate{gain, static_cast<int>(f), midpoint(st.last_value, v)};
            }
          }
        }
        st.left_sum += r[i];
        ++st.left_count;
        st.last_value = v;
      }
    }

    std::vector<std::size_t> next;
    std::vector<std::size_t> split_nodes;
    for (std::size_t s = 0; s < frontier.size() && leaves < config.num_leaves; ++s) {
      const std::size_t node = frontier[s];
      const double mean = sum[node] / tree.nodes[node].cover;
      const double centered_ss = sumsq[node] - sum[node] * mean;
      if (best[s].feature == TreeNode::kLeaf || !(best[s].gain > kMinRelativeGain * std::max(centered_ss, 0.0)) ||
          best[s].gain <= 0.0) {
        continue;
      }
      tree.nodes[node].feature_index = best[s].feature;
      tree.nodes[node].threshold = best[s].threshold;
      for (int side = 0; side < 2; ++side) {
        const std::size_t child = tree.nodes.size();
        (side == 0 ? tree.nodes[node].left : tree.nodes[node].right) = child;
        tree.nodes.push_back(TreeNode{});
        sum.push_back(0.0);
        sumsq.push_back(0.0);
        next.push_back(child);
      }
      split_nodes.push_back(node);
      ++leaves;
    }
    if (split_nodes.empty()) break;

    for (std::size_t i = 0; i < n; ++i) {
      if (slot_of[node_of[i]] < 0) continue;
      const TreeNode& parent = tree.nodes[node_of[i]];
      if (parent.is_leaf()) continue;
      const double v = x(static_cast<Eigen::Index>(i), parent.feature_index);
      node_of[i] = v <= parent.threshold ? parent.left : parent.right;
      sum[node_of[i]] += r[i];
      sumsq[node_of[i]] += r[i] * r[i];
      tree.nodes[node_of[i]].cover += 1.0;
    }
    for (const std::size_t c : next) tree.nodes[c].leaf_value = sum[c] / tree.nodes[c].cover;
    frontier = std::move(next);
  }
  return tree;
}

double mean_squared(const Vector& y, const Vector& pred) {
  return (y - pred).squaredNorm() / static_cast<double>(y.size());
}

}  // namespace

void GbdtConfig::validate() const {
  if (num_leaves < 2) throw Error(ErrorCode::InvalidConfig, "gbdt.num_leaves must be at least 2");
  if (max_depth < 1) throw Error(ErrorCode::InvalidConfig, "gbdt.max_depth must be at least 1");
  if (!(shrinkage > 0.0 && shrinkage <= 1.0)) throw Error(ErrorCode::InvalidConfig, "gbdt.shrinkage must lie in (0, 1]");
  if (min_samples_leaf < 1) throw Error(ErrorCode::InvalidConfig, "gbdt.min_samples_leaf must be at least 1");
  if (patience < 1) throw Error(ErrorCode::InvalidConfig, "gbdt.patience must be at least 1");
}

void to_json(nlohmann::json& j, const GbdtConfig& c) {
  j = {{"num_leaves", c.num_leaves},         {"max_depth", c.max_depth},   {"shrinkage", c.shrinkage},
       {"min_samples_leaf", c.min_samples_leaf}, {"max_rounds", c.max_rounds}, {"patience", c.patience}};
}

void from_json(const nlohmann::json& j, GbdtConfig& c) {
  const GbdtConfig d;
  c.num_leaves = j.value("num_leaves", d.num_leaves);
  c.max_depth = j.value("max_depth", d.max_depth);
  c.shrinkage = j.value("shrinkage", d.shrinkage);
  c.min_samples_leaf = j.value("min_samples_leaf", d.min_samples_leaf);
  c.max_rounds = j.value("max_rounds", d.max_rounds);
  c.patience = j.value("patience", d.patience);
}

double DecisionTree::predict(std::span<const double> row) const {
  std::size_t k = 0;
  while (!nodes[k].is_leaf()) {
    const TreeNode& n = nodes[k];
    k = row[static_cast<std::size_t>(n.feature_index)] <= n.threshold ? n.left : n.right;
  }
  return nodes[k].leaf_value;
}

std::size_t DecisionTree::depth() const {
  std::vector<std::size_t> d(nodes.size(), 0);
  std::size_t deepest = 0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    deepest = std::max(deepest, d[k]);
    if (!nodes[k].is_leaf()) d[nodes[k].left] = d[nodes[k].right] = d[k] + 1;
  }
  return deepest;
}

std::size_t DecisionTree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

double TreeEnsemble::predict_row(std::span<const double> row) const {
  if (row.size() != feature_count) {
    throw Error(ErrorCode::FeatureCountMismatch, "row has " + std::to_string(row.size()) + " features, model expects " +
                                                     std::to_string(feature_count));
  }
  double out = base_score;
  for (const auto& t : trees) out += learning_rate * t.predict(row);
  return out;
}

DecisionTree fit_tree(const Matrix& x, std::span<const double> residuals, const GbdtConfig& config) {
  config.validate();
  if (static_cast<std::size_t>(x.rows()) != residuals.size() || residuals.empty()) {
    throw Error(ErrorCode::LengthMismatch, "fit_tree needs one residual per row");
  }
  return grow(x, sort_columns(x), residuals, config);
}

TreeEnsemble gbdt_train(const TabularDataset& train, const TabularDataset& val, const GbdtConfig& config,
                        BoostingHistory* history) {
  config.validate();
  if (train.rows() == 0 || val.rows() == 0) throw Error(ErrorCode::EmptyInput, "gbdt needs non-empty train and val");
  if (train.features() != val.features()) {
    throw Error(ErrorCode::FeatureCountMismatch, "train and val feature counts differ");
  }
  TreeEnsemble m;
  m.base_score = train.y.mean();
  m.learning_rate = config.shrinkage;
  m.feature_count = train.features();
  m.feature_names = train.feature_names;

  Vector pred_train = Vector::Constant(train.y.size(), m.base_score);
  Vector pred_val = Vector::Constant(val.y.size(), m.base_score);
  BoostingHistory h;
  h.train_mse.push_back(mean_squared(train.y, pred_train));
  h.val_mse.push_back(mean_squared(val.y, pred_val));

  const bool constant_target = (train.y.array() == train.y(0)).all();
  if (!constant_target) {
    const Columns sorted = sort_columns(train.x);
    std::vector<double> residual(train.rows());
    double best_val = h.val_mse[0];
    for (std::size_t round = 1; round <= config.max_rounds; ++round) {
      for (std::size_t i = 0; i < residual.size(); ++i) {
        residual[i] = train.y(static_cast<Eigen::Index>(i)) - pred_train(static_cast<Eigen::Index>(i));
      }
      DecisionTree tree = grow(train.x, sorted, residual, config);
      for (Eigen::Index i = 0; i < train.x.rows(); ++i) {
        pred_train(i) += m.learning_rate * tree.predict({train.x.row(i).data(), train.features()});
      }
      for (Eigen::Index i = 0; i < val.x.rows(); ++i) {
        pred_val(i) += m.learning_rate * tree.predict({val.x.row(i).data(), val.features()});
      }
      m.trees.push_back(std::move(tree));
      h.train_mse.push_back(mean_squared(train.y, pred_train));
      h.val_mse.push_back(mean_squared(val.y, pred_val));
      h.rounds_run = round;
      if (h.val_mse.back() < best_val) {
        best_val = h.val_mse.back();
        h.best_round = round;
      }
      if (round - h.best_round >= config.patience) break;
    }
    m.trees.resize(h.best_round);
  }
  if (history != nullptr) *history = std::move(h);
  return m;
}

Vector gbdt_predict(const TreeEnsemble& m, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != m.feature_count) {
    throw Error(ErrorCode::FeatureCountMismatch, "input has " + std::to_string(x.cols()) + " features, model expects " +
                                                     std::to_string(m.feature_count));
  }
  Vector out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = m.predict_row({x.row(i).data(), m.feature_count});
  return out;
}

namespace {

nlohmann::json node_to_json(const DecisionTree& t, std::size_t k) {
  const TreeNode& n = t.nodes[k];
  if (n.is_leaf()) return {{"leaf_value", n.leaf_value}, {"cover", n.cover}};
  return {{"feature_index", n.feature_index}, {"threshold", n.threshold}, {"leaf_value", n.leaf_value},
          {"cover", n.cover}, {"left", node_to_json(t, n.left)}, {"right", node_to_json(t, n.right)}};
}

// Rebuilds in level order so a loaded tree has the same node layout as a trained one.
DecisionTree tree_from_json(const nlohmann::json& root) {
  DecisionTree t;
  std::vector<const nlohmann::json*> queue{&root};
  for (std::size_t k = 0; k < queue.size(); ++k) {
    const auto& j = *queue[k];
    TreeNode n;
    n.leaf_value = j.at("leaf_value").get<double>();
    n.cover = j.at("cover").get<double>();
    if (j.contains("feature_index")) {
      n.feature_index = j.at("feature_index").get<int>();
      n.threshold = j.at("threshold").get<double>();
      n.left = queue.size();
      queue.push_back(&j.at("left"));
      n.right = queue.size();
      queue.push_back(&j.at("right"));
    }
    t.nodes.push_back(n);
  }
  return t;
}

}  // namespace

void to_json(nlohmann::json& j, const TreeEnsemble& m) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : m.trees) trees.push_back(node_to_json(t, 0));
  j = {{"format", "deformcast-gbdt"}, {"base_score", m.base_score}, {"learning_rate", m.learning_rate},
       {"feature_count", m.feature_count}, {"feature_names", m.feature_names}, {"trees", std::move(trees)}};
}

void from_json(const nlohmann::json& j, TreeEnsemble& m) {
  m.base_score = j.at("base_score").get<double>();
  m.learning_rate = j.at("learning_rate").get<double>();
  m.feature_count = j.at("feature_count").get<std::size_t>();
  m.feature_names = j.value("feature_names", std::vector<std::string>{});
  m.trees.clear();
  for (const auto& t : j.at("trees")) m.trees.push_back(tree_from_json(t));
}

void save_ensemble(const TreeEnsemble& m, const std::filesystem::path& path) {
  detail::write_json_file(path, nlohmann::json(m));
}

TreeEnsemble load_ensemble(const std::filesystem::path& path) {
  try {
    return detail::read_json_file(path).get<TreeEnsemble>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, "'" + path.string() + "': " + e.what());
  }
}

}  // namespace deformcast::tabular
