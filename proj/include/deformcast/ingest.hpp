/**
 * @file ingest.hpp
 * @brief Point-based displacement CSV parsing and input/target window slicing.
 */
#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace deformcast::ingest {

/// One measurement point: projected coordinates (m) and a displacement series (mm).
struct PointRecord {
  std::string point_id;
  double easting{};
  double northing{};
  std::vector<double> series;
};

struct PointSet {
  std::vector<PointRecord> records;
  std::vector<std::string> epoch_labels;

  [[nodiscard]] std::size_t size() const noexcept { return records.size(); }
  [[nodiscard]] std::size_t series_length() const noexcept { return epoch_labels.size(); }
  /// Displacement of every point at one epoch, in record order.
  [[nodiscard]] std::vector<double> epoch_values(std::size_t epoch) const;
};

/**
 * @brief Column layout of a displacement CSV.
 *
 * Column indices are 0-based. Displacement columns start at
 * `first_displacement_column` and run to the end of the row unless
 * `displacement_count` limits them. An EGMS product has its first epoch at
 * index 11.
 */
struct CsvSchema {
  std::string id_column;  ///< empty: ids are generated from the data row number
  std::string easting_column{"easting"};
  std::string northing_column{"northing"};
  std::size_t first_displacement_column{3};
  std::optional<std::size_t> displacement_count;
};

PointSet parse_csv(const std::filesystem::path& path, const CsvSchema& schema);
PointSet parse_csv(std::istream& in, const CsvSchema& schema);

/// Writes `id,easting,northing,<epoch labels...>` with 6 decimal places.
void write_csv(const PointSet& points, std::ostream& out);
void write_csv(const PointSet& points, const std::filesystem::path& path);

/// Record-level invariants: equal series lengths, finite coordinates, no
/// duplicate coordinate pairs. Throws deformcast::Error.
void validate(const PointSet& points);

struct WindowSelection {
  std::size_t input_start{0};
  std::size_t input_len{1};
  std::size_t target_index{1};
};

struct WindowedSeries {
  std::vector<std::vector<double>> inputs;  ///< per point, length input_len
  std::vector<double> targets;              ///< per point
};

/// Throws WindowOutOfRange unless input_start + input_len <= target_index < series_length.
void check_window(const WindowSelection& window, std::size_t series_length);

WindowedSeries select_window(const PointSet& points, const WindowSelection& window);

}  // namespace deformcast::ingest
