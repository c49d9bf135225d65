/**
 * @file evaluate.hpp
 * @brief Error metrics, binned residual statistics and heatmap rendering.
 *
 * Residuals are prediction minus truth, so overestimates are positive.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deformcast/grid.hpp"

namespace deformcast::evaluate {

struct MetricsRecord {
  double rmse{};
  double mse{};
  double r2{};
};

/// Throws EmptyInput, LengthMismatch.
[[nodiscard]] double mse(std::span<const double> y, std::span<const double> yhat);
[[nodiscard]] double rmse(std::span<const double> y, std::span<const double> yhat);
[[nodiscard]] double mae(std::span<const double> y, std::span<const double> yhat);
/// Unclamped; throws ZeroVariance for constant y and EmptyInput for fewer than 2 values.
[[nodiscard]] double r2(std::span<const double> y, std::span<const double> yhat);
[[nodiscard]] MetricsRecord metrics(std::span<const double> y, std::span<const double> yhat);
[[nodiscard]] std::vector<double> residuals(std::span<const double> y, std::span<const double> yhat);

/// Linear interpolation between order statistics of an ascending sample.
[[nodiscard]] double quantile_sorted(std::span<const double> sorted, double q);

struct BinStats {
  double lower{};
  double upper{};
  std::size_t count{};
  std::optional<double> mae;
  std::optional<double> median;
  std::optional<double> q1;
  std::optional<double> q3;
  std::optional<double> whisker_low;
  std::optional<double> whisker_high;
  std::vector<double> outliers;
};

struct BinnedStats {
  std::vector<double> bin_edges;  ///< n_bins + 1 edges
  std::vector<BinStats> bins;
};

/// Equal-width bins over [min(y), max(y)]; the last bin is closed on the right.
[[nodiscard]] std::vector<std::size_t> assign_bins(std::span<const double> y, std::size_t n_bins,
                                                   std::vector<double>* edges = nullptr);
[[nodiscard]] BinnedStats binned_mae(std::span<const double> y, std::span<const double> yhat, std::size_t n_bins);
/// Quartiles by linear interpolation; whiskers reach the furthest residual
/// within 1.5 IQR of the quartiles; anything beyond is an outlier.
[[nodiscard]] BinnedStats binned_residual_boxstats(std::span<const double> y, std::span<const double> yhat,
                                                   std::size_t n_bins);
/// Both families in one record.
[[nodiscard]] BinnedStats binned_stats(std::span<const double> y, std::span<const double> yhat, std::size_t n_bins);

struct Rgb {
  std::uint8_t r, g, b;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Blue at -range, white at 0, red at +range; clamps outside the range.
[[nodiscard]] Rgb diverging_color(double value, double range);

/// Row 0 at the top. Missing cells render mid-grey. Throws InvalidConfig for range <= 0.
[[nodiscard]] std::vector<std::uint8_t> heatmap_pixels(const grid::DisplacementMap& map, double range);
/// Binary P6 PPM. Throws InvalidConfig, IoError.
void render_heatmap(const grid::DisplacementMap& map, double range, const std::filesystem::path& path);

struct NamedMap {
  std::string name;
  grid::DisplacementMap map;
  /// Pixels held out of this model's training; when non-empty, metrics are
  /// also reported on them alone.
  std::vector<std::size_t> validation_pixels;
};

struct ReportOptions {
  std::size_t n_bins{10};
  double heatmap_range{0.0};  ///< <= 0 selects max |truth|
};

struct ModelReport {
  std::string name;
  MetricsRecord full;
  std::optional<MetricsRecord> validation;
  BinnedStats bins;
};

struct Report {
  double heatmap_range{};
  std::vector<ModelReport> models;
};

/**
 * Writes metrics.json, scatter_<m>.csv, residuals_<m>.csv, bins_<m>.json and
 * heatmap_{truth,<m>,diff_<m>}.ppm into `out_dir`. Throws SpecMismatch naming
 * the first model whose grid differs from the truth.
 */
Report build_report(const grid::DisplacementMap& truth, const std::vector<NamedMap>& predictions,
                    const ReportOptions& options, const std::filesystem::path& out_dir);

}  // namespace deformcast::evaluate
