/**
 * @file gbdt.hpp
 * @brief Least-squares gradient boosting with exact greedy splits.
 *
 * Trees grow level by level up to max_depth, stopping once num_leaves is
 * reached. Candidate thresholds are midpoints between consecutive distinct
 * feature values; a row goes left when x[feature] <= threshold. Equal-gain
 * candidates resolve to the lowest feature index, then the lowest threshold.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "deformcast/tabular.hpp"

namespace deformcast::tabular {

struct GbdtConfig {
  std::size_t num_leaves{31};
  std::size_t max_depth{6};
  double shrinkage{0.1};
  std::size_t min_samples_leaf{20};
  std::size_t max_rounds{500};
  std::size_t patience{20};

  void validate() const;
};

void to_json(nlohmann::json& j, const GbdtConfig& c);
void from_json(const nlohmann::json& j, GbdtConfig& c);

struct TreeNode {
  static constexpr int kLeaf = -1;
  int feature_index{kLeaf};
  double threshold{};
  std::size_t left{};
  std::size_t right{};
  double leaf_value{};
  double cover{};

  [[nodiscard]] bool is_leaf() const noexcept { return feature_index == kLeaf; }
};

/// nodes[0] is the root.
struct DecisionTree {
  std::vector<TreeNode> nodes;

  [[nodiscard]] double predict(std::span<const double> row) const;
  [[nodiscard]] std::size_t depth() const;
  [[nodiscard]] std::size_t leaf_count() const;
};

struct TreeEnsemble {
  double base_score{};
  double learning_rate{1.0};
  std::size_t feature_count{};
  std::vector<std::string> feature_names;
  std::vector<DecisionTree> trees;

  [[nodiscard]] double predict_row(std::span<const double> row) const;
};

/// Validation MSE series: entry 0 is the base-only model, entry r follows round r.
struct BoostingHistory {
  std::vector<double> train_mse;
  std::vector<double> val_mse;
  std::size_t best_round{};
  std::size_t rounds_run{};
};

/// Fits one tree to `residuals` over the rows of `x` (exposed for tests).
[[nodiscard]] DecisionTree fit_tree(const Matrix& x, std::span<const double> residuals, const GbdtConfig& config);

[[nodiscard]] TreeEnsemble gbdt_train(const TabularDataset& train, const TabularDataset& val, const GbdtConfig& config,
                                      BoostingHistory* history = nullptr);

/// Throws FeatureCountMismatch.
[[nodiscard]] Vector gbdt_predict(const TreeEnsemble& m, const Matrix& x);

void to_json(nlohmann::json& j, const TreeEnsemble& m);
void from_json(const nlohmann::json& j, TreeEnsemble& m);
void save_ensemble(const TreeEnsemble& m, const std::filesystem::path& path);
[[nodiscard]] TreeEnsemble load_ensemble(const std::filesystem::path& path);

}  // namespace deformcast::tabular
