/**
 * @file pipeline.hpp
 * @brief Run configuration and the stages behind the command-line tool.
 *
 * Every stage reads its inputs from and writes its outputs to the run's
 * output directory, so stages can be invoked one at a time or chained by
 * run_pipeline(). The configuration schema is documented in docs/config.md.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deformcast/cnn_lstm.hpp"
#include "deformcast/gbdt.hpp"
#include "deformcast/ingest.hpp"
#include "deformcast/lasso.hpp"
#include "deformcast/synth.hpp"

namespace deformcast::synth {
void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);
}  // namespace deformcast::synth

namespace deformcast::pipeline {

struct InputConfig {
  std::optional<std::filesystem::path> csv;  ///< relative paths resolve against the config file
  ingest::CsvSchema schema;
  std::optional<synth::SceneConfig> scene;
};

struct SplitConfig {
  double val_fraction{0.2};
  std::uint64_t seed{42};
};

struct ExplainConfig {
  bool enabled{true};
  std::size_t k{10000};
  std::uint64_t seed{42};
};

struct EvaluateConfig {
  std::size_t n_bins{10};
  double heatmap_range{0.0};  ///< <= 0: max |truth|
};

struct RunConfig {
  InputConfig input;
  std::filesystem::path output_dir{"deformcast-out"};
  std::size_t grid_height{32};
  std::size_t grid_width{32};
  ingest::WindowSelection window{0, 24, 24};
  bool cnn_lstm_enabled{true};
  nn::CnnLstmConfig cnn_lstm;
  bool gbdt_enabled{true};
  tabular::GbdtConfig gbdt;
  bool lasso_enabled{true};
  tabular::LassoConfig lasso;
  SplitConfig split;
  ExplainConfig explain;
  EvaluateConfig evaluate;

  /// Throws InvalidConfig; also WindowOutOfRange when a scene fixes the series length.
  void validate() const;
};

/// Sets the value at a dotted key path from `key.path=value`; the value is
/// parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Reads a config file and applies overrides in order.
[[nodiscard]] nlohmann::json load_config_json(const std::filesystem::path& path,
                                              const std::vector<std::string>& overrides = {});

/// Rejects unknown keys. Throws InvalidConfig.
[[nodiscard]] RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
[[nodiscard]] nlohmann::json to_json(const RunConfig& c);

// --- Stages -----------------------------------------------------------------
// Each stage validates the configuration before touching the filesystem and
// writes a one-line log entry per artifact to `log`.

/// Writes points.csv (from the scene or a validated copy of the input CSV).
void run_ingest(const RunConfig& c, std::ostream& log);
/// Reads points.csv; writes tensor.{f32,json} and target.{f32,json}.
void run_grid(const RunConfig& c, std::ostream& log);
/// Writes cnn_lstm.ckpt and history_cnn_lstm.json.
void run_train_nn(const RunConfig& c, std::ostream& log);
/// Writes split.json, gbdt.json and history_gbdt.json.
void run_train_gbdt(const RunConfig& c, std::ostream& log);
/// Writes split.json and lasso.json.
void run_train_lasso(const RunConfig& c, std::ostream& log);
/// Writes pred_<model>.{f32,json} for every enabled model.
void run_predict(const RunConfig& c, std::ostream& log);
/// Writes the report files (metrics.json, scatter/residual CSVs, bins, heatmaps).
void run_evaluate(const RunConfig& c, std::ostream& log);
/// Writes shap.json, shap_phi.csv, shap_values.csv, shap_summary.json, shap_force.json.
void run_explain(const RunConfig& c, std::ostream& log);

/// All stages in order. Errors propagate as StageError.
void run_pipeline(const RunConfig& c, std::ostream& log);

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Runs `fn`, rethrowing any failure as StageError tagged with `stage`.
template <typename Fn>
void run_stage(const std::string& stage, Fn&& fn) {
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

struct MemoryRow {
  std::size_t t, h, w;
  double mib;
};

/// Rows for every (t, r, r) combination.
[[nodiscard]] std::vector<MemoryRow> memory_study(const std::vector<std::size_t>& steps,
                                                  const std::vector<std::size_t>& resolutions);

}  // namespace deformcast::pipeline
