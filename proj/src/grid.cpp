#include "deformcast/grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <utility>

#include <nlohmann/json.hpp>

#include "deformcast/binary_io.hpp"
#include "deformcast/error.hpp"

namespace deformcast::grid {
namespace {

constexpr double kBarycentricTolerance = 1e-12;
constexpr double kIncircleTolerance = 1e-12;

double orient(const Point2& a, const Point2& b, const Point2& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

// Positive when d lies strictly inside the circumcircle of the counter-clockwise
// triangle abc, beyond a relative rounding allowance.
bool in_circumcircle(const Point2& a, const Point2& b, const Point2& c, const Point2& d) {
  const double adx = a.x - d.x, ady = a.y - d.y;
  const double bdx = b.x - d.x, bdy = b.y - d.y;
  const double cdx = c.x - d.x, cdy = c.y - d.y;
  const double alift = adx * adx + ady * ady;
  const double blift = bdx * bdx + bdy * bdy;
  const double clift = cdx * cdx + cdy * cdy;
  const double det = alift * (bdx * cdy - cdx * bdy) + blift * (cdx * ady - adx * cdy) +
                     clift * (adx * bdy - bdx * ady);
  const double permanent = alift * (std::abs(bdx * cdy) + std::abs(cdx * bdy)) +
                           blift * (std::abs(cdx * ady) + std::abs(adx * cdy)) +
                           clift * (std::abs(adx * bdy) + std::abs(bdx * ady));
  return det > kIncircleTolerance * permanent;
}

}  // namespace

double GridSpec::node_easting(std::size_t col) const {
  if (col + 1 == width) return max_easting;
  return min_easting + (max_easting - min_easting) * static_cast<double>(col) / static_cast<double>(width - 1);
}

double GridSpec::node_northing(std::size_t row) const {
  if (row + 1 == height) return min_northing;
  return max_northing - (max_northing - min_northing) * static_cast<double>(row) / static_cast<double>(height - 1);
}

void GridSpec::validate() const {
  if (height < 2 || width < 2) {
    throw Error(ErrorCode::InvalidConfig, "grid needs at least 2x2 nodes, got " + std::to_string(height) + "x" +
                                              std::to_string(width));
  }
  if (!(max_easting > min_easting) || !(max_northing > min_northing)) {
    throw Error(ErrorCode::DegenerateExtent, "grid bounding box has zero extent");
  }
}

std::size_t DisplacementMap::missing_count() const {
  return static_cast<std::size_t>(std::count_if(missing.begin(), missing.end(), [](auto m) { return m != 0; }));
}

GridSpec build_grid_spec(const ingest::PointSet& points, std::size_t height, std::size_t width) {
  ingest::validate(points);
  if (points.records.empty()) throw Error(ErrorCode::EmptyInput, "point set is empty");
  GridSpec spec{height, width, points.records[0].easting, points.records[0].easting, points.records[0].northing,
                points.records[0].northing};
  for (const auto& r : points.records) {
    spec.min_easting = std::min(spec.min_easting, r.easting);
    spec.max_easting = std::max(spec.max_easting, r.easting);
    spec.min_northing = std::min(spec.min_northing, r.northing);
    spec.max_northing = std::max(spec.max_northing, r.northing);
  }
  if (!(spec.max_easting > spec.min_easting) || !(spec.max_northing > spec.min_northing)) {
    throw Error(ErrorCode::DegenerateExtent, "all points share an easting or a northing");
  }
  spec.validate();
  return spec;
}

// --- Triangulation -----------------------------------------------------------

Triangulation::Triangulation(std::span<const Point2> points) : points_(points.begin(), points.end()) {
  if (points_.size() < 3) {
    throw Error(ErrorCode::TriangulationFailure, "need at least 3 points, got " + std::to_string(points_.size()));
  }
  for (const auto& p : points_) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      throw Error(ErrorCode::TriangulationFailure, "non-finite point coordinate");
    }
  }
  sweep();
  legalize();
}

void Triangulation::sweep() {
  const std::size_t n = points_.size();
  // Predicates run on coordinates relative to the lexicographically first point.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& pa = points_[static_cast<std::size_t>(a)];
    const auto& pb = points_[static_cast<std::size_t>(b)];
    return pa.x < pb.x || (pa.x == pb.x && pa.y < pb.y);
  });
  const Point2 origin = points_[static_cast<std::size_t>(order[0])];
  std::vector<Point2> local(n);
  for (std::size_t i = 0; i < n; ++i) local[i] = {points_[i].x - origin.x, points_[i].y - origin.y};
  const auto at = [&](int i) -> const Point2& { return local[static_cast<std::size_t>(i)]; };

  for (std::size_t i = 1; i < n; ++i) {
    const auto& a = at(order[i - 1]);
    const auto& b = at(order[i]);
    if (a.x == b.x && a.y == b.y) throw Error(ErrorCode::TriangulationFailure, "duplicate point");
  }

  std::size_t apex = 2;
  while (apex < n && orient(at(order[0]), at(order[1]), at(order[apex])) == 0.0) ++apex;
  if (apex == n) throw Error(ErrorCode::TriangulationFailure, "all points are collinear");

  // Fan the collinear prefix to the first off-line point.
  const int a = order[apex];
  const bool apex_left = orient(at(order[0]), at(order[1]), at(a)) > 0.0;
  for (std::size_t i = 0; i + 1 < apex; ++i) {
    if (apex_left) {
      triangles_.push_back({order[i], order[i + 1], a});
    } else {
      triangles_.push_back({order[i + 1], order[i], a});
    }
  }
  if (apex_left) {
    hull_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(apex));
    hull_.push_back(a);
  } else {
    hull_.assign(order.rbegin() + static_cast<std::ptrdiff_t>(n - apex), order.rend());
    hull_.push_back(a);
  }

  // Every later point is lexicographically beyond all earlier ones, hence outside the hull.
  for (std::size_t k = apex + 1; k < n; ++k) {
    const int p = order[k];
    const std::size_t h = hull_.size();
    std::vector<std::uint8_t> visible(h);
    bool any = false;
    for (std::size_t i = 0; i < h; ++i) {
      visible[i] = orient(at(hull_[i]), at(hull_[(i + 1) % h]), at(p)) < 0.0;
      any = any || visible[i];
    }
    if (!any) throw Error(ErrorCode::TriangulationFailure, "insertion point sees no hull edge");

    std::size_t start = 0;
    while (!(visible[start] && !visible[(start + h - 1) % h])) {
      if (++start == h) throw Error(ErrorCode::TriangulationFailure, "hull fully visible from new point");
    }
    std::size_t run = 0;
    while (run < h && visible[(start + run) % h]) {
      const int u = hull_[(start + run) % h];
      const int v = hull_[(start + run + 1) % h];
      triangles_.push_back({u, p, v});
      ++run;
    }
    const std::size_t end = (start + run) % h;
    std::vector<int> next;
    next.reserve(h + 1);
    for (std::size_t i = end;; i = (i + 1) % h) {
      next.push_back(hull_[i]);
      if (i == start) break;
    }
    next.push_back(p);
    hull_ = std::move(next);
  }
}

void Triangulation::legalize() {
  const std::size_t nt = triangles_.size();
  neighbors_.assign(nt, {-1, -1, -1});
  std::map<std::pair<int, int>, std::pair<int, int>> open_edges;
  for (std::size_t t = 0; t < nt; ++t) {
    for (int i = 0; i < 3; ++i) {
      const int u = triangles_[t][static_cast<std::size_t>((i + 1) % 3)];
      const int v = triangles_[t][static_cast<std::size_t>((i + 2) % 3)];
      const auto twin = open_edges.find({v, u});
      if (twin != open_edges.end()) {
        neighbors_[t][static_cast<std::size_t>(i)] = twin->second.first;
        neighbors_[static_cast<std::size_t>(twin->second.first)][static_cast<std::size_t>(twin->second.second)] =
            static_cast<int>(t);
        open_edges.erase(twin);
      } else {
        open_edges[{u, v}] = {static_cast<int>(t), i};
      }
    }
  }

  const Point2 origin = points_[static_cast<std::size_t>(hull_.front())];
  std::vector<Point2> local(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) local[i] = {points_[i].x - origin.x, points_[i].y - origin.y};
  const auto pt = [&](int i) -> const Point2& { return local[static_cast<std::size_t>(i)]; };
  const auto slot = [](const std::array<int, 3>& arr, int value) {
    for (int i = 0; i < 3; ++i) {
      if (arr[static_cast<std::size_t>(i)] == value) return i;
    }
    return -1;
  };

  std::vector<std::pair<int, int>> stack;
  for (std::size_t t = 0; t < nt; ++t) {
    for (int i = 0; i < 3; ++i) {
      if (neighbors_[t][static_cast<std::size_t>(i)] > static_cast<int>(t)) stack.emplace_back(static_cast<int>(t), i);
    }
  }

  const std::size_t flip_cap = 64 * nt * nt + 1024;
  std::size_t flips = 0;
  while (!stack.empty() && flips < flip_cap) {
    const auto [t, i] = stack.back();
    stack.pop_back();
    auto& tri_t = triangles_[static_cast<std::size_t>(t)];
    auto& nb_t = neighbors_[static_cast<std::size_t>(t)];
    const int u = nb_t[static_cast<std::size_t>(i)];
    if (u < 0) continue;
    auto& tri_u = triangles_[static_cast<std::size_t>(u)];
    auto& nb_u = neighbors_[static_cast<std::size_t>(u)];
    const int j = slot(nb_u, t);
    if (j < 0) continue;

    const int p = tri_t[static_cast<std::size_t>(i)];
    const int e1 = tri_t[static_cast<std::size_t>((i + 1) % 3)];
    const int e2 = tri_t[static_cast<std::size_t>((i + 2) % 3)];
    const int q = tri_u[static_cast<std::size_t>(j)];
    if (!in_circumcircle(pt(p), pt(e1), pt(e2), pt(q))) continue;
    if (orient(pt(p), pt(e1), pt(q)) <= 0.0 || orient(pt(q), pt(e2), pt(p)) <= 0.0) continue;

    const int na = nb_t[static_cast<std::size_t>((i + 1) % 3)];  // across edge (e2, p)
    const int nb = nb_t[static_cast<std::size_t>((i + 2) % 3)];  // across edge (p, e1)
    const int nc = nb_u[static_cast<std::size_t>((j + 1) % 3)];  // across edge (e1, q)
    const int nd = nb_u[static_cast<std::size_t>((j + 2) % 3)];  // across edge (q, e2)

    tri_t = {p, e1, q};
    nb_t = {nc, u, nb};
    tri_u = {q, e2, p};
    nb_u = {na, t, nd};
    if (na >= 0) {
      auto& nn = neighbors_[static_cast<std::size_t>(na)];
      nn[static_cast<std::size_t>(slot(nn, t))] = u;
    }
    if (nc >= 0) {
      auto& nn = neighbors_[static_cast<std::size_t>(nc)];
      nn[static_cast<std::size_t>(slot(nn, u))] = t;
    }
    ++flips;
    stack.emplace_back(t, 0);
    stack.emplace_back(t, 2);
    stack.emplace_back(u, 0);
    stack.emplace_back(u, 2);
  }
}

// --- Interpolation -----------------------------------------------------------

std::vector<Point2> point_coordinates(const ingest::PointSet& points) {
  std::vector<Point2> coords;
  coords.reserve(points.size());
  for (const auto& r : points.records) coords.push_back({r.easting, r.northing});
  return coords;
}

InterpolationPlan::InterpolationPlan(std::span<const Point2> points, const GridSpec& spec)
    : spec_(spec), point_count_(points.size()), cells_(spec.cells()) {
  spec_.validate();
  const Triangulation tri(points);

  const double x0 = spec_.min_easting;
  const double y0 = spec_.max_northing;
  const double dx = (spec_.max_easting - spec_.min_easting) / static_cast<double>(spec_.width - 1);
  const double dy = (spec_.max_northing - spec_.min_northing) / static_cast<double>(spec_.height - 1);
  std::vector<double> col_x(spec_.width), row_y(spec_.height);
  for (std::size_t c = 0; c < spec_.width; ++c) col_x[c] = spec_.node_easting(c) - x0;
  for (std::size_t r = 0; r < spec_.height; ++r) row_y[r] = spec_.node_northing(r) - y0;

  const auto local = [&](int i) {
    const auto& p = points[static_cast<std::size_t>(i)];
    return Point2{p.x - x0, p.y - y0};
  };
  const auto clamp_index = [](double v, std::size_t n) {
    if (v < 0.0) return std::size_t{0};
    if (v > static_cast<double>(n - 1)) return n - 1;
    return static_cast<std::size_t>(v);
  };

  for (const auto& t : tri.triangles()) {
    const Point2 a = local(t[0]);
    const Point2 b = local(t[1]);
    const Point2 c = local(t[2]);
    const double area = orient(a, b, c);
    if (!(area > 0.0)) continue;

    const double min_x = std::min({a.x, b.x, c.x}), max_x = std::max({a.x, b.x, c.x});
    const double min_y = std::min({a.y, b.y, c.y}), max_y = std::max({a.y, b.y, c.y});
    const std::size_t c_lo = clamp_index(std::floor(min_x / dx) - 1.0, spec_.width);
    const std::size_t c_hi = clamp_index(std::ceil(max_x / dx) + 1.0, spec_.width);
    const std::size_t r_lo = clamp_index(std::floor(-max_y / dy) - 1.0, spec_.height);
    const std::size_t r_hi = clamp_index(std::ceil(-min_y / dy) + 1.0, spec_.height);

    for (std::size_t r = r_lo; r <= r_hi; ++r) {
      for (std::size_t col = c_lo; col <= c_hi; ++col) {
        auto& cell = cells_[r * spec_.width + col];
        if (cell.vertices[0] >= 0) continue;
        const Point2 p{col_x[col], row_y[r]};
        const double la = orient(p, b, c) / area;
        const double lb = orient(a, p, c) / area;
        const double lc = orient(a, b, p) / area;
        if (la < -kBarycentricTolerance || lb < -kBarycentricTolerance || lc < -kBarycentricTolerance) continue;
        cell.vertices = t;
        cell.weights = {la, lb, lc};
      }
    }
  }
}

DisplacementMap InterpolationPlan::apply(std::span<const double> values, std::size_t epoch_index) const {
  if (values.size() != point_count_) {
    throw Error(ErrorCode::LengthMismatch, "expected " + std::to_string(point_count_) + " values, got " +
                                               std::to_string(values.size()));
  }
  DisplacementMap map{spec_, std::vector<double>(cells_.size(), 0.0), {}, epoch_index};
  for (std::size_t k = 0; k < cells_.size(); ++k) {
    const auto& cell = cells_[k];
    if (cell.vertices[0] < 0) {
      if (map.missing.empty()) map.missing.assign(cells_.size(), 0);
      map.missing[k] = 1;
      continue;
    }
    double v = 0.0;
    for (std::size_t i = 0; i < 3; ++i) v += cell.weights[i] * values[static_cast<std::size_t>(cell.vertices[i])];
    map.values[k] = v;
  }
  return map;
}

DisplacementMap interpolate_linear(std::span<const Point2> points, std::span<const double> values,
                                   const GridSpec& spec, std::size_t epoch_index) {
  if (points.size() != values.size()) {
    throw Error(ErrorCode::LengthMismatch, "points and values differ in length");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonNumeric, "non-finite point value");
  }
  return InterpolationPlan(points, spec).apply(values, epoch_index);
}

DisplacementMap fill_missing(DisplacementMap map) {
  for (std::size_t k = 0; k < map.missing.size(); ++k) {
    if (map.missing[k] != 0) map.values[k] = 0.0;
  }
  map.missing.clear();
  return map;
}

SpatioTemporalTensor assemble_tensor(std::vector<DisplacementMap> maps) {
  if (maps.empty()) throw Error(ErrorCode::EmptyInput, "no maps to assemble");
  const GridSpec spec = maps.front().spec;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (!(maps[i].spec == spec)) {
      throw Error(ErrorCode::SpecMismatch, "map " + std::to_string(i) + " has a different grid spec");
    }
    if (maps[i].values.size() != spec.cells()) {
      throw Error(ErrorCode::ShapeMismatch, "map " + std::to_string(i) + " has wrong cell count");
    }
    if (i > 0 && maps[i].epoch_index <= maps[i - 1].epoch_index) {
      throw Error(ErrorCode::InvalidConfig, "epoch indices must be strictly increasing");
    }
    // Tensor steps are always filled.
    if (!maps[i].missing.empty()) maps[i] = fill_missing(std::move(maps[i]));
  }
  return SpatioTemporalTensor{spec, std::move(maps)};
}

SpatioTemporalTensor grid_epochs(const ingest::PointSet& points, const GridSpec& spec,
                                 std::span<const std::size_t> epochs) {
  const auto coords = point_coordinates(points);
  const InterpolationPlan plan(coords, spec);
  std::vector<DisplacementMap> maps;
  maps.reserve(epochs.size());
  for (std::size_t e : epochs) {
    const auto values = points.epoch_values(e);
    maps.push_back(fill_missing(plan.apply(values, e)));
  }
  return assemble_tensor(std::move(maps));
}

double estimate_memory(std::size_t t, std::size_t h, std::size_t w, std::size_t bytes_per_value) {
  if (t == 0 || h == 0 || w == 0 || bytes_per_value == 0) {
    throw Error(ErrorCode::InvalidConfig, "memory estimate needs positive dimensions");
  }
  const double bytes = static_cast<double>(t) * static_cast<double>(h) * static_cast<double>(w) *
                       static_cast<double>(bytes_per_value);
  return std::round(bytes / (1024.0 * 1024.0) * 100.0) / 100.0;
}

// --- Persistence -------------------------------------------------------------

void write_tensor(const SpatioTemporalTensor& tensor, const std::vector<std::string>& epoch_labels,
                  const std::filesystem::path& base) {
  const auto& spec = tensor.spec;
  std::vector<float> flat;
  flat.reserve(tensor.length() * spec.cells());
  nlohmann::json indices = nlohmann::json::array();
  for (const auto& step : tensor.steps) {
    for (double v : step.values) flat.push_back(static_cast<float>(v));
    indices.push_back(step.epoch_index);
  }

  auto blob_path = base;
  blob_path += ".f32";
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw Error(ErrorCode::IoError, "cannot write " + blob_path.string());
  detail::write_le<float>(blob, flat);

  nlohmann::json sidecar = {
      {"t", tensor.length()},
      {"h", spec.height},
      {"w", spec.width},
      {"bbox",
       {{"min_easting", spec.min_easting},
        {"max_easting", spec.max_easting},
        {"min_northing", spec.min_northing},
        {"max_northing", spec.max_northing}}},
      {"epoch_labels", epoch_labels},
      {"epoch_indices", indices},
  };
  auto json_path = base;
  json_path += ".json";
  std::ofstream js(json_path);
  if (!js) throw Error(ErrorCode::IoError, "cannot write " + json_path.string());
  js << sidecar.dump(2) << '\n';
}

StoredTensor read_tensor(const std::filesystem::path& base) {
  auto json_path = base;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw Error(ErrorCode::IoError, "cannot open " + json_path.string());
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, json_path.string() + ": " + e.what());
  }

  StoredTensor out;
  GridSpec spec;
  std::size_t t = 0;
  std::vector<std::size_t> indices;
  try {
    t = sidecar.at("t").get<std::size_t>();
    spec.height = sidecar.at("h").get<std::size_t>();
    spec.width = sidecar.at("w").get<std::size_t>();
    const auto& bbox = sidecar.at("bbox");
    spec.min_easting = bbox.at("min_easting").get<double>();
    spec.max_easting = bbox.at("max_easting").get<double>();
    spec.min_northing = bbox.at("min_northing").get<double>();
    spec.max_northing = bbox.at("max_northing").get<double>();
    out.epoch_labels = sidecar.value("epoch_labels", std::vector<std::string>{});
    indices = sidecar.value("epoch_indices", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, json_path.string() + ": " + e.what());
  }
  spec.validate();
  if (t == 0) throw Error(ErrorCode::FormatError, json_path.string() + ": empty tensor");
  if (indices.empty()) {
    indices.resize(t);
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  }
  if (indices.size() != t) throw Error(ErrorCode::FormatError, "epoch_indices length differs from t");

  auto blob_path = base;
  blob_path += ".f32";
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw Error(ErrorCode::IoError, "cannot open " + blob_path.string());
  const auto flat = detail::read_le<float>(blob, t * spec.cells());

  std::vector<DisplacementMap> maps;
  maps.reserve(t);
  for (std::size_t s = 0; s < t; ++s) {
    const auto first = flat.begin() + static_cast<std::ptrdiff_t>(s * spec.cells());
    maps.push_back({spec, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(spec.cells())), {}, indices[s]});
  }
  out.tensor = assemble_tensor(std::move(maps));
  return out;
}

}  // namespace deformcast::grid
