/**
 * @file tabular.hpp
 * @brief Pixel-per-row view of a spatio-temporal tensor.
 *
 * Row k = r * W + c holds pixel (r, c). Column j holds the displacement at
 * lag T_in - j, so the last column is the most recent step ("t-1").
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "deformcast/grid.hpp"

namespace deformcast::tabular {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct TabularDataset {
  Matrix x;
  Vector y;
  std::vector<std::string> feature_names;
  /// Pixel index (r * W + c) of each row; identity after tensor_to_table.
  std::vector<std::size_t> pixel;

  [[nodiscard]] std::size_t rows() const noexcept { return static_cast<std::size_t>(x.rows()); }
  [[nodiscard]] std::size_t features() const noexcept { return static_cast<std::size_t>(x.cols()); }
  [[nodiscard]] TabularDataset subset(std::span<const std::size_t> rows) const;
};

/// "t-T", ..., "t-1".
[[nodiscard]] std::vector<std::string> lag_feature_names(std::size_t t_in);

/// Throws SpecMismatch when the target grid differs from the tensor's.
[[nodiscard]] TabularDataset tensor_to_table(const grid::SpatioTemporalTensor& x, const grid::DisplacementMap& y);

/// Inverse of the row ordering: one value per pixel, row-major.
[[nodiscard]] grid::DisplacementMap table_to_map(std::span<const double> predictions, const grid::GridSpec& spec,
                                                 std::size_t epoch_index);

struct Split {
  TabularDataset train;
  TabularDataset val;
};

/// floor(val_fraction * N) rows go to validation, chosen by a seeded shuffle.
[[nodiscard]] Split split_train_val(const TabularDataset& d, double val_fraction, std::uint64_t seed);

}  // namespace deformcast::tabular
