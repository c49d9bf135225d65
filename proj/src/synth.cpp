#include "deformcast/synth.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "deformcast/error.hpp"

namespace deformcast::synth {

void SceneConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); };
  if (n_points < 3) fail("scene needs at least 3 points");
  if (!(extent > 0.0) || !std::isfinite(extent)) fail("scene extent must be positive");
  if (t_steps < 2) fail("scene needs at least 2 steps");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) fail("noise_std must be non-negative");
  if (!std::isfinite(trend)) fail("trend must be finite");
  if (epoch_spacing_days <= 0) fail("epoch spacing must be positive");
  for (const auto& b : bowls) {
    if (!(b.radius > 0.0) || !std::isfinite(b.radius)) fail("bowl radius must be positive");
    if (!std::isfinite(b.final_depth) || !std::isfinite(b.center_easting) || !std::isfinite(b.center_northing)) {
      fail("bowl parameters must be finite");
    }
    if (b.onset + 1 >= t_steps) fail("bowl onset must precede the last step");
  }
}

double depth_profile(const Bowl& bowl, std::size_t step, std::size_t t_steps) {
  if (step <= bowl.onset) return 0.0;
  const double s = static_cast<double>(step - bowl.onset) / static_cast<double>(t_steps - 1 - bowl.onset);
  return bowl.shape == OnsetShape::Linear ? s : s * s;
}

double Scene::truth(double easting, double northing, std::size_t step) const {
  double d = config_.trend * static_cast<double>(step);
  for (const auto& b : config_.bowls) {
    const double de = easting - b.center_easting;
    const double dn = northing - b.center_northing;
    const double sigma = b.radius / 2.0;
    d += b.final_depth * depth_profile(b, step, config_.t_steps) *
         std::exp(-(de * de + dn * dn) / (2.0 * sigma * sigma));
  }
  return d;
}

std::vector<std::string> epoch_dates(const std::string& start, int spacing_days, std::size_t count) {
  int y = 0;
  unsigned m = 0, d = 0;
  if (std::sscanf(start.c_str(), "%d-%u-%u", &y, &m, &d) != 3) {
    throw Error(ErrorCode::InvalidConfig, "start_date must be YYYY-MM-DD, got '" + start + "'");
  }
  const std::chrono::year_month_day first{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!first.ok()) throw Error(ErrorCode::InvalidConfig, "invalid start_date '" + start + "'");
  const std::chrono::sys_days origin{first};
  std::vector<std::string> labels;
  labels.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::chrono::year_month_day ymd{origin + std::chrono::days{static_cast<long>(k) * spacing_days}};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    labels.emplace_back(buf);
  }
  return labels;
}

Scene generate_scene(const SceneConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> jitter(-0.25, 0.25);

  const auto nx = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(config.n_points))));
  const std::size_t ny = (config.n_points + nx - 1) / nx;
  const double sx = config.extent / static_cast<double>(nx);
  const double sy = config.extent / static_cast<double>(ny);

  ingest::PointSet points;
  points.epoch_labels = epoch_dates(config.start_date, config.epoch_spacing_days, config.t_steps);
  points.records.reserve(config.n_points);
  for (std::size_t k = 0; k < config.n_points; ++k) {
    const std::size_t i = k % nx;
    const std::size_t j = k / nx;
    ingest::PointRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "MP%06zu", k + 1);
    rec.point_id = id;
    rec.easting = config.origin_easting + (static_cast<double>(i) + 0.5 + jitter(rng)) * sx;
    rec.northing = config.origin_northing + (static_cast<double>(j) + 0.5 + jitter(rng)) * sy;
    points.records.push_back(std::move(rec));
  }

  Scene scene(config, {});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& rec : points.records) {
    rec.series.reserve(config.t_steps);
    for (std::size_t t = 0; t < config.t_steps; ++t) {
      double v = scene.truth(rec.easting, rec.northing, t);
      if (config.noise_std > 0.0) v += config.noise_std * noise(rng);
      rec.series.push_back(v);
    }
  }
  return Scene(config, std::move(points));
}

}  // namespace deformcast::synth
