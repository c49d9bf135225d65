/**
 * @file synth.hpp
 * @brief Seeded synthetic subsidence scenes with an analytic ground truth.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "deformcast/ingest.hpp"

namespace deformcast::synth {

enum class OnsetShape { Linear, Quadratic };

/// Gaussian subsidence bowl; sigma is radius / 2.
struct Bowl {
  double center_easting{};
  double center_northing{};
  double radius{1.0};
  double final_depth{};  ///< mm reached at the last step
  std::size_t onset{0};  ///< last step with zero contribution
  OnsetShape shape{OnsetShape::Linear};
};

struct SceneConfig {
  std::size_t n_points{400};
  double extent{2000.0};  ///< side of the square scene, m
  std::size_t t_steps{25};
  std::vector<Bowl> bowls;
  double trend{0.0};  ///< mm per step, applied everywhere
  double noise_std{0.0};
  std::uint64_t seed{42};
  double origin_easting{0.0};
  double origin_northing{0.0};
  std::string start_date{"2018-01-01"};
  int epoch_spacing_days{6};

  /// Throws InvalidConfig.
  void validate() const;
};

/// Fraction of a bowl's final depth reached at `step` (0 up to onset, 1 at the last step).
double depth_profile(const Bowl& bowl, std::size_t step, std::size_t t_steps);

class Scene {
 public:
  Scene(SceneConfig config, ingest::PointSet points) : config_(std::move(config)), points_(std::move(points)) {}

  [[nodiscard]] const SceneConfig& config() const noexcept { return config_; }
  [[nodiscard]] const ingest::PointSet& points() const noexcept { return points_; }
  /// Noise-free displacement (mm) at any location and step.
  [[nodiscard]] double truth(double easting, double northing, std::size_t step) const;

 private:
  SceneConfig config_;
  ingest::PointSet points_;
};

Scene generate_scene(const SceneConfig& config);

/// ISO dates `start + k * spacing_days`, k = 0..count-1.
std::vector<std::string> epoch_dates(const std::string& start, int spacing_days, std::size_t count);

}  // namespace deformcast::synth
