#include "deformcast/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>

#include "deformcast/error.hpp"

namespace deformcast::ingest {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

// RFC 4180 style splitting; quoted fields may contain commas and "" escapes.
std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          current.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        current.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  fields.push_back(std::move(current));
  return fields;
}

std::optional<double> parse_double(std::string_view text) {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  if (text.empty()) return std::nullopt;
  double value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return value;
}

std::size_t find_column(const std::vector<std::string>& header, const std::string& name) {
  const auto it = std::find_if(header.begin(), header.end(),
                               [&](const std::string& h) { return trim(h) == name; });
  if (it == header.end()) {
    throw Error(ErrorCode::MissingColumn, "column '" + name + "' not found in header");
  }
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

std::vector<double> PointSet::epoch_values(std::size_t epoch) const {
  if (epoch >= series_length()) {
    throw Error(ErrorCode::IndexOutOfRange, "epoch " + std::to_string(epoch) + " beyond series length " +
                                                std::to_string(series_length()));
  }
  std::vector<double> values;
  values.reserve(records.size());
  for (const auto& r : records) values.push_back(r.series[epoch]);
  return values;
}

PointSet parse_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) {
    throw Error(ErrorCode::EmptyInput, "CSV has no header row");
  }
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_csv_line(trim(line));

  const std::size_t easting_col = find_column(header, schema.easting_column);
  const std::size_t northing_col = find_column(header, schema.northing_column);
  const std::optional<std::size_t> id_col =
      schema.id_column.empty() ? std::nullopt : std::optional(find_column(header, schema.id_column));

  const std::size_t first = schema.first_displacement_column;
  if (first >= header.size()) {
    throw Error(ErrorCode::MissingColumn, "first displacement column " + std::to_string(first) +
                                              " beyond header width " + std::to_string(header.size()));
  }
  std::size_t count = header.size() - first;
  if (schema.displacement_count) {
    if (*schema.displacement_count == 0 || first + *schema.displacement_count > header.size()) {
      throw Error(ErrorCode::MissingColumn, "displacement columns [" + std::to_string(first) + ", " +
                                                std::to_string(first + *schema.displacement_count) +
                                                ") exceed header width " + std::to_string(header.size()));
    }
    count = *schema.displacement_count;
  }

  PointSet points;
  points.epoch_labels.reserve(count);
  for (std::size_t j = 0; j < count; ++j) points.epoch_labels.emplace_back(trim(header[first + j]));

  std::size_t row = 0;
  while (std::getline(in, line)) {
    const auto content = trim(line);
    if (content.empty()) continue;
    ++row;
    const auto fields = split_csv_line(content);
    if (fields.size() != header.size()) {
      throw Error(ErrorCode::RaggedRow, "row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                                            " fields, header has " + std::to_string(header.size()));
    }
    const auto numeric = [&](std::size_t col) {
      const auto v = parse_double(fields[col]);
      if (!v) {
        throw Error(ErrorCode::NonNumeric, "row " + std::to_string(row) + ", column " + std::to_string(col) +
                                               " ('" + std::string(trim(header[col])) + "'): cannot parse '" +
                                               fields[col] + "'");
      }
      return *v;
    };

    PointRecord rec;
    rec.point_id = id_col ? std::string(trim(fields[*id_col])) : std::to_string(row);
    rec.easting = numeric(easting_col);
    rec.northing = numeric(northing_col);
    rec.series.reserve(count);
    for (std::size_t j = 0; j < count; ++j) rec.series.push_back(numeric(first + j));
    points.records.push_back(std::move(rec));
  }

  validate(points);
  return points;
}

PointSet parse_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return parse_csv(in, schema);
}

void write_csv(const PointSet& points, std::ostream& out) {
  out << "point_id,easting,northing";
  for (const auto& label : points.epoch_labels) out << ',' << label;
  out << '\n' << std::fixed << std::setprecision(6);
  for (const auto& r : points.records) {
    out << r.point_id << ',' << r.easting << ',' << r.northing;
    for (double v : r.series) out << ',' << v;
    out << '\n';
  }
}

void write_csv(const PointSet& points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  write_csv(points, out);
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

void validate(const PointSet& points) {
  const std::size_t length = points.series_length();
  std::vector<std::pair<double, double>> coords;
  coords.reserve(points.size());
  for (const auto& r : points.records) {
    if (r.series.size() != length) {
      throw Error(ErrorCode::RaggedRow, "point '" + r.point_id + "' has " + std::to_string(r.series.size()) +
                                            " epochs, expected " + std::to_string(length));
    }
    if (!std::isfinite(r.easting) || !std::isfinite(r.northing)) {
      throw Error(ErrorCode::NonNumeric, "point '" + r.point_id + "' has non-finite coordinates");
    }
    coords.emplace_back(r.easting, r.northing);
  }
  std::sort(coords.begin(), coords.end());
  const auto dup = std::adjacent_find(coords.begin(), coords.end());
  if (dup != coords.end()) {
    std::ostringstream msg;
    msg << std::setprecision(17) << "duplicate coordinate (" << dup->first << ", " << dup->second << ")";
    throw Error(ErrorCode::DuplicateCoordinate, msg.str());
  }
}

void check_window(const WindowSelection& window, std::size_t series_length) {
  if (window.input_len == 0 || window.input_start + window.input_len > window.target_index ||
      window.target_index >= series_length) {
    throw Error(ErrorCode::WindowOutOfRange,
                "window [" + std::to_string(window.input_start) + ", " +
                    std::to_string(window.input_start + window.input_len) + ") -> " +
                    std::to_string(window.target_index) + " invalid for series length " +
                    std::to_string(series_length));
  }
}

WindowedSeries select_window(const PointSet& points, const WindowSelection& window) {
  check_window(window, points.series_length());
  WindowedSeries out;
  out.inputs.reserve(points.size());
  out.targets.reserve(points.size());
  for (const auto& r : points.records) {
    const auto begin = r.series.begin() + static_cast<std::ptrdiff_t>(window.input_start);
    out.inputs.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(window.input_len));
    out.targets.push_back(r.series[window.target_index]);
  }
  return out;
}

}  // namespace deformcast::ingest
