/**
 * @file explain.hpp
 * @brief Shapley attributions for tree ensembles.
 *
 * Absent features are marginalized along the tree path: at a split on an
 * absent feature both children are visited, weighted by their share of the
 * parent's cover. The fast recursion and the exhaustive oracle use this same
 * coalition value, so they agree up to rounding.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deformcast/gbdt.hpp"

namespace deformcast::explain {

using tabular::Matrix;
using tabular::TreeEnsemble;

struct Attribution {
  double base_value{};
  std::vector<double> phi;
};

/// Cover-weighted mean output of the ensemble (the empty-coalition value).
[[nodiscard]] double expected_value(const TreeEnsemble& m);

/// Path-dependent TreeSHAP. Throws FeatureCountMismatch, ZeroCover.
[[nodiscard]] Attribution tree_shap(const TreeEnsemble& m, std::span<const double> row);

/// Ensemble output when only the features flagged in `present` are known.
[[nodiscard]] double coalition_value(const TreeEnsemble& m, std::span<const double> row,
                                     const std::vector<bool>& present);

/// Exhaustive enumeration over the features the ensemble splits on.
/// Throws TooManyFeatures above kBruteForceMaxFeatures.
inline constexpr std::size_t kBruteForceMaxFeatures = 15;
[[nodiscard]] std::vector<double> shap_brute_force(const TreeEnsemble& m, std::span<const double> row);

struct ShapReport {
  double base_value{};
  Matrix phi;          ///< K x F
  Matrix sample_rows;  ///< K x F
  std::vector<std::size_t> row_indices;
  std::vector<std::string> feature_names;

  [[nodiscard]] std::size_t rows() const noexcept { return static_cast<std::size_t>(phi.rows()); }
  [[nodiscard]] double prediction(std::size_t i) const;
};

inline constexpr std::size_t kDefaultSampleSize = 10000;

/// Explains min(N, k) rows drawn without replacement by a seeded sampler,
/// kept in ascending row order.
[[nodiscard]] ShapReport explain_rows(const TreeEnsemble& m, const Matrix& x, std::size_t k = kDefaultSampleSize,
                                      std::uint64_t seed = 42);

struct FeatureSummary {
  std::string feature;
  std::size_t index{};
  double mean_abs_phi{};
  std::vector<std::pair<double, double>> points;  ///< (phi, feature value) per sampled row
};

/// Sorted by mean |phi| descending; ties keep feature order.
[[nodiscard]] std::vector<FeatureSummary> shap_summary(const ShapReport& report);

enum class Direction { Increase, Decrease, None };
[[nodiscard]] const char* to_string(Direction d) noexcept;

struct Contribution {
  std::string feature;
  double value{};
  double phi{};
  Direction direction{Direction::None};
};

struct ForceDecomposition {
  double base_value{};
  double prediction{};
  std::vector<Contribution> contributions;  ///< by |phi| descending
};

/// Throws IndexOutOfRange.
[[nodiscard]] ForceDecomposition force_decomposition(const ShapReport& report, std::size_t row_index);

/**
 * Writes `<dir>/shap.json` (base_value, feature_names, K, row indices),
 * `<dir>/shap_phi.csv` and `<dir>/shap_values.csv` (K rows x F columns) and
 * `<dir>/shap_summary.json`.
 */
void write_shap_report(const ShapReport& report, const std::filesystem::path& dir);
[[nodiscard]] ShapReport read_shap_report(const std::filesystem::path& dir);

}  // namespace deformcast::explain
