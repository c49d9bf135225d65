/**
 * @file grid.hpp
 * @brief Scattered-to-raster interpolation and the spatio-temporal tensor.
 *
 * Node (0, 0) sits at (min_easting, max_northing): row 0 is the northernmost
 * row. Nodes span the bounding box inclusively, so the spacing along an axis
 * with N nodes is extent / (N - 1).
 */
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deformcast/ingest.hpp"

namespace deformcast::grid {

struct GridSpec {
  std::size_t height{};
  std::size_t width{};
  double min_easting{};
  double max_easting{};
  double min_northing{};
  double max_northing{};

  [[nodiscard]] std::size_t cells() const noexcept { return height * width; }
  [[nodiscard]] double node_easting(std::size_t col) const;
  [[nodiscard]] double node_northing(std::size_t row) const;
  /// Throws InvalidConfig when height/width < 2 or the box is empty.
  void validate() const;

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/**
 * @brief One H x W raster, row-major.
 *
 * `missing` is either empty (no missing cells) or holds one flag per cell.
 * Missing cells carry 0.0 in `values` but are distinguished by the flag
 * until fill_missing() runs.
 */
struct DisplacementMap {
  GridSpec spec;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;
  std::size_t epoch_index{};

  [[nodiscard]] double at(std::size_t row, std::size_t col) const { return values[row * spec.width + col]; }
  [[nodiscard]] bool is_missing(std::size_t k) const { return !missing.empty() && missing[k] != 0; }
  [[nodiscard]] std::size_t missing_count() const;
};

struct SpatioTemporalTensor {
  GridSpec spec;
  std::vector<DisplacementMap> steps;

  [[nodiscard]] std::size_t length() const noexcept { return steps.size(); }
  /// The [batch, time, channel, height, width] view; batch and channel are 1.
  [[nodiscard]] std::array<std::size_t, 5> shape5d() const noexcept {
    return {1, steps.size(), 1, spec.height, spec.width};
  }
};

GridSpec build_grid_spec(const ingest::PointSet& points, std::size_t height, std::size_t width);

struct Point2 {
  double x{};
  double y{};
};

/**
 * @brief Delaunay triangulation of a planar point set.
 *
 * Points are inserted in lexicographic (x, y) order, each outside the hull
 * built so far, then Lawson flips restore the empty-circumcircle property.
 * Cocircular configurations are never flipped, so the result is a
 * deterministic function of the input.
 */
class Triangulation {
 public:
  explicit Triangulation(std::span<const Point2> points);

  [[nodiscard]] const std::vector<std::array<int, 3>>& triangles() const noexcept { return triangles_; }
  [[nodiscard]] const std::vector<Point2>& points() const noexcept { return points_; }
  /// Counter-clockwise hull vertex indices.
  [[nodiscard]] const std::vector<int>& hull() const noexcept { return hull_; }

 private:
  void sweep();
  void legalize();

  std::vector<Point2> points_;
  std::vector<std::array<int, 3>> triangles_;
  std::vector<std::array<int, 3>> neighbors_;  // neighbors_[t][i] is across from triangles_[t][i]
  std::vector<int> hull_;
};

/**
 * @brief Barycentric weights of every grid node against a fixed triangulation.
 *
 * Built once per point set and applied to each epoch's values.
 */
class InterpolationPlan {
 public:
  InterpolationPlan(std::span<const Point2> points, const GridSpec& spec);

  [[nodiscard]] const GridSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] std::size_t point_count() const noexcept { return point_count_; }
  [[nodiscard]] bool inside_hull(std::size_t cell) const { return cells_[cell].vertices[0] >= 0; }

  /// Linear interpolation of `values` (one per point); out-of-hull nodes are flagged missing.
  [[nodiscard]] DisplacementMap apply(std::span<const double> values, std::size_t epoch_index) const;

 private:
  struct Cell {
    std::array<int, 3> vertices{-1, -1, -1};
    std::array<double, 3> weights{};
  };

  GridSpec spec_;
  std::size_t point_count_{};
  std::vector<Cell> cells_;
};

std::vector<Point2> point_coordinates(const ingest::PointSet& points);

/// One-shot interpolation; build an InterpolationPlan to reuse the triangulation.
DisplacementMap interpolate_linear(std::span<const Point2> points, std::span<const double> values,
                                   const GridSpec& spec, std::size_t epoch_index = 0);

DisplacementMap fill_missing(DisplacementMap map);

SpatioTemporalTensor assemble_tensor(std::vector<DisplacementMap> maps);

/// Filled maps of the given epochs, sharing one triangulation.
SpatioTemporalTensor grid_epochs(const ingest::PointSet& points, const GridSpec& spec,
                                 std::span<const std::size_t> epochs);

/// MiB needed for a [1, t, 1, h, w] tensor, rounded to 2 decimals.
double estimate_memory(std::size_t t, std::size_t h, std::size_t w, std::size_t bytes_per_value = 4);

/**
 * Tensor persistence: `<base>.f32` holds little-endian float32 values in
 * t-major then row-major order; `<base>.json` holds
 * {t, h, w, bbox, epoch_labels, epoch_indices}.
 */
void write_tensor(const SpatioTemporalTensor& tensor, const std::vector<std::string>& epoch_labels,
                  const std::filesystem::path& base);

struct StoredTensor {
  SpatioTemporalTensor tensor;
  std::vector<std::string> epoch_labels;
};

StoredTensor read_tensor(const std::filesystem::path& base);

}  // namespace deformcast::grid
