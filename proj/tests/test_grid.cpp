#include <algorithm>
#include <cmath>

#include "deformcast/grid.hpp"
#include "deformcast/ingest.hpp"
#include "test_util.hpp"

using namespace deformcast;
using namespace deformcast::grid;

namespace {

ingest::PointSet point_set(const std::vector<Point2>& pts) {
  ingest::PointSet ps;
  ps.epoch_labels = {"e0"};
  for (std::size_t i = 0; i < pts.size(); ++i) ps.records.push_back({std::to_string(i), pts[i].x, pts[i].y, {0.0}});
  return ps;
}

double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Andrew's monotone chain; counter-clockwise, collinear points dropped.
std::vector<Point2> convex_hull(std::vector<Point2> p) {
  std::sort(p.begin(), p.end(), [](const Point2& a, const Point2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  std::vector<Point2> h(2 * p.size());
  std::size_t k = 0;
  for (const auto& q : p) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], q) <= 0) --k;
    h[k++] = q;
  }
  for (std::size_t i = p.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  h.resize(k - 1);
  return h;
}

// Signed distance-like margin of q inside the hull: min over edges of the
// normalized cross product (positive inside).
double hull_margin(const std::vector<Point2>& hull, const Point2& q) {
  double m = 1e300;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const Point2& a = hull[i];
    const Point2& b = hull[(i + 1) % hull.size()];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    m = std::min(m, cross(a, b, q) / len);
  }
  return m;
}

std::vector<Point2> random_points(std::mt19937_64& rng, std::size_t n, double extent) {
  std::uniform_real_distribution<double> u(0.0, extent);
  std::vector<Point2> pts(n);
  for (auto& p : pts) p = {u(rng), u(rng)};
  return pts;
}

}  // namespace

TEST(BuildGridSpec, TightExtent) {
  const auto spec = build_grid_spec(point_set({{0, 0}, {10, 0}, {0, 10}}), 2, 2);
  EXPECT_EQ(spec.min_easting, 0.0);
  EXPECT_EQ(spec.max_easting, 10.0);
  EXPECT_EQ(spec.min_northing, 0.0);
  EXPECT_EQ(spec.max_northing, 10.0);
  EXPECT_EQ(spec.node_easting(0), 0.0);
  EXPECT_EQ(spec.node_northing(0), 10.0);  // north-up
  EXPECT_EQ(spec.node_northing(1), 0.0);
}

TEST(BuildGridSpec, CollinearOnEastingIsDegenerate) {
  EXPECT_DC_ERROR((void)build_grid_spec(point_set({{5, 0}, {5, 3}, {5, 9}}), 4, 4), ErrorCode::DegenerateExtent);
}

TEST(BuildGridSpec, LatticeSpacing) {
  std::vector<Point2> pts;
  for (int i = 0; i < 11; ++i) {
    for (int j = 0; j < 11; ++j) pts.push_back({3100000.0 + 100.0 * i, 3300000.0 + 100.0 * j});
  }
  const auto spec = build_grid_spec(point_set(pts), 11, 11);
  for (std::size_t c = 0; c < 11; ++c) EXPECT_NEAR(spec.node_easting(c), 3100000.0 + 100.0 * c, 1e-6);
  EXPECT_NEAR(spec.node_easting(1) - spec.node_easting(0), 100.0, 1e-6);
  EXPECT_EQ(spec.node_easting(10), spec.max_easting);
}

TEST(BuildGridSpec, RejectsTooSmallGrids) {
  EXPECT_DC_ERROR((void)build_grid_spec(point_set({{0, 0}, {1, 0}, {0, 1}}), 1, 4), ErrorCode::InvalidConfig);
}

TEST(Triangulation, FailsOnDegenerateInput) {
  const std::vector<Point2> two{{0, 0}, {1, 1}};
  EXPECT_DC_ERROR(Triangulation{two}, ErrorCode::TriangulationFailure);
  const std::vector<Point2> line{{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  EXPECT_DC_ERROR(Triangulation{line}, ErrorCode::TriangulationFailure);
  const std::vector<Point2> dup{{0, 0}, {1, 0}, {0, 1}, {1, 0}};
  EXPECT_DC_ERROR(Triangulation{dup}, ErrorCode::TriangulationFailure);
}

TEST(Triangulation, EmptyCircumcircles) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = random_points(rng, 4 + rng() % 60, 100.0);
    const Triangulation tri(pts);
    // Euler: a triangulation of n points with h hull vertices has 2n - h - 2 triangles.
    EXPECT_EQ(tri.triangles().size(), 2 * pts.size() - convex_hull(pts).size() - 2);
    for (const auto& t : tri.triangles()) {
      const auto& a = tri.points()[static_cast<std::size_t>(t[0])];
      const auto& b = tri.points()[static_cast<std::size_t>(t[1])];
      const auto& c = tri.points()[static_cast<std::size_t>(t[2])];
      ASSERT_GT(cross(a, b, c), 0.0);
      // Circumcenter by the perpendicular-bisector formula.
      const double d = 2 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
      const double a2 = a.x * a.x + a.y * a.y, b2 = b.x * b.x + b.y * b.y, c2 = c.x * c.x + c.y * c.y;
      const Point2 o{(a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d,
                     (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d};
      const double r = std::hypot(a.x - o.x, a.y - o.y);
      for (const auto& p : pts) EXPECT_GE(std::hypot(p.x - o.x, p.y - o.y), r * (1 - 1e-9));
    }
  }
}

TEST(InterpolateLinear, AffinePlaneFromFourPoints) {
  const std::vector<Point2> pts{{0, 0}, {10, 0}, {0, 10}, {10, 10}};
  std::vector<double> v;
  for (const auto& p : pts) v.push_back(2 + 0.5 * p.x - 1.0 * p.y);
  const auto spec = GridSpec{6, 6, 0, 10, 0, 10};
  const auto map = interpolate_linear(pts, v, spec);
  EXPECT_EQ(map.missing_count(), 0u);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_NEAR(map.at(r, c), 2 + 0.5 * spec.node_easting(c) - spec.node_northing(r), 1e-9);
    }
  }
}

TEST(InterpolateLinear, ConstantField) {
  std::mt19937_64 rng(8);
  const auto pts = random_points(rng, 30, 50.0);
  const std::vector<double> v(pts.size(), 7.5);
  const auto map = interpolate_linear(pts, v, GridSpec{16, 16, 0, 50, 0, 50});
  for (std::size_t k = 0; k < map.values.size(); ++k) {
    if (!map.is_missing(k)) { EXPECT_NEAR(map.values[k], 7.5, 1e-12); }
  }
}

TEST(InterpolateLinear, OutsideHullIsMissingThenZero) {
  const std::vector<Point2> pts{{0, 0}, {10, 0}, {0, 10}};
  const std::vector<double> v{1, 2, 3};
  const auto spec = GridSpec{3, 3, 0, 10, 0, 10};
  const auto map = interpolate_linear(pts, v, spec);
  // Node (row 2 = south, col 2 = east) is (10, 0): a vertex. Node (0, 2) is (10, 10): outside.
  EXPECT_TRUE(map.is_missing(0 * 3 + 2));
  EXPECT_FALSE(map.is_missing(2 * 3 + 2));
  EXPECT_EQ(map.at(2, 2), 2.0);
  const auto filled = fill_missing(map);
  EXPECT_EQ(filled.at(0, 2), 0.0);
  EXPECT_EQ(filled.missing_count(), 0u);
}

TEST(InterpolateLinear, AffineExactnessAgainstIndependentHull) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> coef(-3.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pts = random_points(rng, 4 + rng() % 97, 1000.0);
    const double a = coef(rng), b = coef(rng), c = coef(rng);
    std::vector<double> v;
    for (const auto& p : pts) v.push_back(a + b * p.x + c * p.y);
    const GridSpec spec{24, 24, 0, 1000, 0, 1000};
    const auto map = interpolate_linear(pts, v, spec);
    const auto hull = convex_hull(pts);
    for (std::size_t r = 0; r < spec.height; ++r) {
      for (std::size_t col = 0; col < spec.width; ++col) {
        const Point2 q{spec.node_easting(col), spec.node_northing(r)};
        const double margin = hull_margin(hull, q);
        const std::size_t k = r * spec.width + col;
        if (margin > 1e-6) {
          ASSERT_FALSE(map.is_missing(k)) << "trial " << trial;
          EXPECT_NEAR(map.values[k], a + b * q.x + c * q.y, 1e-9);
        } else if (margin < -1e-6) {
          EXPECT_TRUE(map.is_missing(k)) << "trial " << trial;
        }
      }
    }
  }
}

TEST(InterpolateLinear, ConvexCombinationAndPointReproduction) {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 30; ++trial) {
    // Points on a coarse lattice so some of them coincide with grid nodes.
    std::vector<Point2> pts;
    for (int i = 0; i <= 8; ++i) {
      for (int j = 0; j <= 8; ++j) {
        if (rng() % 3 != 0 || (i % 8 == 0 && j % 8 == 0)) pts.push_back({10.0 * i, 10.0 * j});
      }
    }
    const auto v = testutil::uniform_values(rng, pts.size(), -5.0, 5.0);
    const GridSpec spec{9, 9, 0, 80, 0, 80};
    const auto map = interpolate_linear(pts, v, spec);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    for (std::size_t k = 0; k < map.values.size(); ++k) {
      ASSERT_FALSE(map.is_missing(k));
      EXPECT_GE(map.values[k], *lo - 1e-12);
      EXPECT_LE(map.values[k], *hi + 1e-12);
    }
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto col = static_cast<std::size_t>(pts[i].x / 10.0);
      const auto row = 8 - static_cast<std::size_t>(pts[i].y / 10.0);
      EXPECT_NEAR(map.at(row, col), v[i], 1e-12);
    }
  }
}

TEST(InterpolationPlan, SharedAcrossEpochs) {
  std::mt19937_64 rng(2);
  const auto pts = random_points(rng, 40, 100.0);
  const GridSpec spec{8, 8, 0, 100, 0, 100};
  const InterpolationPlan plan(pts, spec);
  for (int e = 0; e < 3; ++e) {
    const auto v = testutil::uniform_values(rng, pts.size(), -1, 1);
    const auto a = plan.apply(v, static_cast<std::size_t>(e));
    const auto b = interpolate_linear(pts, v, spec, static_cast<std::size_t>(e));
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(a.missing, b.missing);
    EXPECT_EQ(a.epoch_index, static_cast<std::size_t>(e));
  }
  EXPECT_DC_ERROR((void)plan.apply(std::vector<double>(3), 0), ErrorCode::LengthMismatch);
}

TEST(FillMissing, Cases) {
  const auto spec = testutil::square_spec(2);
  DisplacementMap m{spec, {1, 0, 0, 0}, {0, 1, 1, 1}, 0};
  const auto f = fill_missing(m);
  EXPECT_EQ(f.values, (std::vector<double>{1, 0, 0, 0}));
  EXPECT_EQ(f.missing_count(), 0u);

  DisplacementMap none{spec, {1, 2, 3, 4}, {}, 0};
  EXPECT_EQ(fill_missing(none).values, none.values);

  DisplacementMap all{spec, {0, 0, 0, 0}, {1, 1, 1, 1}, 0};
  EXPECT_EQ(fill_missing(all).values, std::vector<double>(4, 0.0));
}

TEST(AssembleTensor, OrderShapeAndErrors) {
  const auto spec = testutil::square_spec(3);
  std::vector<DisplacementMap> maps;
  for (std::size_t t = 0; t < 4; ++t) maps.push_back(testutil::make_map(spec, std::vector<double>(9, double(t)), t));
  const auto tensor = assemble_tensor(maps);
  EXPECT_EQ(tensor.length(), 4u);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(tensor.steps[t].values, maps[t].values);
  EXPECT_EQ(tensor.shape5d(), (std::array<std::size_t, 5>{1, 4, 1, 3, 3}));

  EXPECT_EQ(assemble_tensor({maps[0]}).length(), 1u);
  EXPECT_DC_ERROR((void)assemble_tensor({}), ErrorCode::EmptyInput);
  auto other = maps[1];
  other.spec.max_easting = 99.0;
  EXPECT_DC_ERROR((void)assemble_tensor({maps[0], other}), ErrorCode::SpecMismatch);
  EXPECT_DC_ERROR((void)assemble_tensor({maps[1], maps[0]}), ErrorCode::InvalidConfig);
}

TEST(AssembleTensor, LargeShapeContract) {
  const GridSpec spec{256, 256, 0, 1, 0, 1};
  std::vector<DisplacementMap> maps;
  for (std::size_t t = 0; t < 300; ++t) maps.push_back({spec, std::vector<double>(spec.cells()), {}, t});
  const auto tensor = assemble_tensor(std::move(maps));
  EXPECT_EQ(tensor.shape5d(), (std::array<std::size_t, 5>{1, 300, 1, 256, 256}));
}

TEST(EstimateMemory, ResolutionStudy) {
  EXPECT_EQ(estimate_memory(300, 128, 128), 18.75);
  EXPECT_EQ(estimate_memory(300, 512, 512), 300.00);
  EXPECT_EQ(estimate_memory(300, 256, 256), 75.00);
  EXPECT_EQ(estimate_memory(300, 256, 256, 8), 150.00);
  EXPECT_DC_ERROR((void)estimate_memory(0, 1, 1), ErrorCode::InvalidConfig);
}

TEST(TensorPersistence, RoundTripThroughFloat32) {
  const auto dir = testutil::scratch_dir("tensor");
  std::mt19937_64 rng(9);
  const GridSpec spec{4, 5, 10, 20, -3, 7};
  std::vector<DisplacementMap> maps;
  for (std::size_t t = 0; t < 3; ++t) maps.push_back({spec, testutil::uniform_values(rng, 20, -10, 10), {}, 2 * t + 1});
  const auto tensor = assemble_tensor(maps);
  write_tensor(tensor, {"a", "b", "c"}, dir / "x");
  EXPECT_EQ(std::filesystem::file_size(dir / "x.f32"), 3u * 20u * 4u);
  const auto back = read_tensor(dir / "x");
  EXPECT_EQ(back.tensor.spec, spec);
  EXPECT_EQ(back.epoch_labels, (std::vector<std::string>{"a", "b", "c"}));
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(back.tensor.steps[t].epoch_index, 2 * t + 1);
    for (std::size_t k = 0; k < 20; ++k) {
      EXPECT_EQ(back.tensor.steps[t].values[k], static_cast<double>(static_cast<float>(maps[t].values[k])));
    }
  }
}
