/**
 * @file lasso.hpp
 * @brief L1-regularized linear model fitted by Adam on standardized data.
 *
 * Objective on z-scored features and target:
 *   (1/N) * sum (w . z + b - t)^2 + alpha * sum |w_j|
 * The subgradient of |w| at 0 is taken as 0. The step size decays linearly
 * to zero over the run so iterates settle instead of oscillating around the
 * kink.
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

struct LassoConfig {
  double alpha{0.01};
  double learning_rate{0.005};
  std::size_t epochs{3000};
  std::uint64_t seed{42};

  void validate() const;
};

void to_json(nlohmann::json& j, const LassoConfig& c);
void from_json(const nlohmann::json& j, LassoConfig& c);

struct LinearModel {
  std::vector<double> weights;
  double bias{};
  std::vector<double> feature_means;
  std::vector<double> feature_stds;  ///< 1 for constant columns
  double target_mean{};
  double target_std{1.0};
  std::vector<std::string> feature_names;

  /// Weights and intercept in raw feature / target units.
  [[nodiscard]] std::vector<double> raw_weights() const;
  [[nodiscard]] double raw_intercept() const;
};

struct LassoHistory {
  std::vector<double> objective;  ///< standardized objective before each update
};

[[nodiscard]] LinearModel lasso_train(const TabularDataset& d, const LassoConfig& config,
                                      LassoHistory* history = nullptr);

/// Throws FeatureCountMismatch.
[[nodiscard]] Vector lasso_predict(const LinearModel& m, const Matrix& x);

void to_json(nlohmann::json& j, const LinearModel& m);
void from_json(const nlohmann::json& j, LinearModel& m);
void save_linear_model(const LinearModel& m, const std::filesystem::path& path);
[[nodiscard]] LinearModel load_linear_model(const std::filesystem::path& path);

}  // namespace deformcast::tabular
