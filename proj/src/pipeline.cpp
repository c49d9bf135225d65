#include "deformcast/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>

#include "deformcast/error.hpp"
#include "deformcast/evaluate.hpp"
#include "deformcast/explain.hpp"
#include "deformcast/grid.hpp"
#include "deformcast/json_io.hpp"
#include "deformcast/tabular.hpp"

namespace deformcast::synth {

void to_json(nlohmann::json& j, const SceneConfig& c) {
  nlohmann::json bowls = nlohmann::json::array();
  for (const auto& b : c.bowls) {
    bowls.push_back({{"center_easting", b.center_easting},
                     {"center_northing", b.center_northing},
                     {"radius", b.radius},
                     {"final_depth", b.final_depth},
                     {"onset", b.onset},
                     {"shape", b.shape == OnsetShape::Quadratic ? "quadratic" : "linear"}});
  }
  j = {{"n_points", c.n_points},         {"extent", c.extent},
       {"t_steps", c.t_steps},           {"bowls", std::move(bowls)},
       {"trend", c.trend},               {"noise_std", c.noise_std},
       {"seed", c.seed},                 {"origin_easting", c.origin_easting},
       {"origin_northing", c.origin_northing}, {"start_date", c.start_date},
       {"epoch_spacing_days", c.epoch_spacing_days}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  const SceneConfig d;
  c.n_points = j.value("n_points", d.n_points);
  c.extent = j.value("extent", d.extent);
  c.t_steps = j.value("t_steps", d.t_steps);
  c.trend = j.value("trend", d.trend);
  c.noise_std = j.value("noise_std", d.noise_std);
  c.seed = j.value("seed", d.seed);
  c.origin_easting = j.value("origin_easting", d.origin_easting);
  c.origin_northing = j.value("origin_northing", d.origin_northing);
  c.start_date = j.value("start_date", d.start_date);
  c.epoch_spacing_days = j.value("epoch_spacing_days", d.epoch_spacing_days);
  c.bowls.clear();
  for (const auto& b : j.value("bowls", nlohmann::json::array())) {
    Bowl bowl;
    bowl.center_easting = b.at("center_easting").get<double>();
    bowl.center_northing = b.at("center_northing").get<double>();
    bowl.radius = b.at("radius").get<double>();
    bowl.final_depth = b.at("final_depth").get<double>();
    bowl.onset = b.value("onset", std::size_t{0});
    const auto shape = b.value("shape", std::string{"linear"});
    if (shape != "linear" && shape != "quadratic") {
      throw Error(ErrorCode::InvalidConfig, "bowl shape must be 'linear' or 'quadratic', got '" + shape + "'");
    }
    bowl.shape = shape == "quadratic" ? OnsetShape::Quadratic : OnsetShape::Linear;
    c.bowls.push_back(bowl);
  }
}

}  // namespace deformcast::synth

namespace deformcast::pipeline {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const char* const kModelNames[] = {"cnn_lstm", "gbdt", "lasso"};

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "'" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (ok.count(key) == 0) {
      throw Error(ErrorCode::InvalidConfig,
                  "unknown key '" + (section.empty() ? key : section + "." + key) + "'");
    }
  }
}

json section(const json& j, const char* key) { return j.contains(key) ? j.at(key) : json::object(); }

fs::path out(const RunConfig& c, const std::string& name) { return c.output_dir / name; }

struct GriddedData {
  grid::SpatioTemporalTensor x;
  grid::DisplacementMap y;
};

GriddedData load_gridded(const RunConfig& c) {
  auto stored = grid::read_tensor(out(c, "tensor"));
  auto target = grid::read_tensor(out(c, "target"));
  if (target.tensor.steps.size() != 1 || !(target.tensor.spec == stored.tensor.spec)) {
    throw Error(ErrorCode::SpecMismatch, "target artifact does not match the input tensor grid");
  }
  if (stored.tensor.spec.height != c.grid_height || stored.tensor.spec.width != c.grid_width ||
      stored.tensor.length() != c.window.input_len) {
    throw Error(ErrorCode::SpecMismatch, "gridded artifacts do not match the configured grid/window; rerun 'grid'");
  }
  return {std::move(stored.tensor), std::move(target.tensor.steps[0])};
}

struct SplitData {
  tabular::TabularDataset full;
  tabular::Split split;
};

SplitData split_table(const RunConfig& c, const GriddedData& g) {
  auto full = tabular::tensor_to_table(g.x, g.y);
  auto split = tabular::split_train_val(full, c.split.val_fraction, c.split.seed);
  return {std::move(full), std::move(split)};
}

void write_split(const RunConfig& c, const tabular::Split& s, std::ostream& log) {
  detail::write_json_file(out(c, "split.json"), {{"val_fraction", c.split.val_fraction},
                                                 {"seed", c.split.seed},
                                                 {"validation_pixels", s.val.pixel}});
  log << "[split] " << s.train.rows() << " train / " << s.val.rows() << " validation pixels -> split.json\n";
}

std::vector<std::size_t> read_validation_pixels(const RunConfig& c) {
  const auto j = detail::read_json_file(out(c, "split.json"));
  return j.at("validation_pixels").get<std::vector<std::size_t>>();
}

void write_prediction(const RunConfig& c, const std::string& model, const grid::DisplacementMap& map,
                      const std::string& label, std::ostream& log) {
  grid::SpatioTemporalTensor t{map.spec, {map}};
  grid::write_tensor(t, {label}, out(c, "pred_" + model));
  log << "[predict] " << model << " -> pred_" << model << ".f32\n";
}

bool model_enabled(const RunConfig& c, const std::string& name) {
  if (name == "cnn_lstm") return c.cnn_lstm_enabled;
  if (name == "gbdt") return c.gbdt_enabled;
  return c.lasso_enabled;
}

}  // namespace

// --- Configuration ------------------------------------------------------------

void RunConfig::validate() const {
  if (input.csv.has_value() == input.scene.has_value()) {
    throw Error(ErrorCode::InvalidConfig, "input needs exactly one of 'csv' or 'scene'");
  }
  if (output_dir.empty()) throw Error(ErrorCode::InvalidConfig, "output_dir must not be empty");
  if (grid_height < 2 || grid_width < 2) throw Error(ErrorCode::InvalidConfig, "grid height and width must be >= 2");
  if (window.input_len < 1) throw Error(ErrorCode::InvalidConfig, "window.input_len must be >= 1");
  if (input.scene) {
    input.scene->validate();
    ingest::check_window(window, input.scene->t_steps);
  } else if (window.input_start + window.input_len > window.target_index) {
    throw Error(ErrorCode::WindowOutOfRange, "window.target_index must follow the input window");
  }
  if (cnn_lstm_enabled) {
    cnn_lstm.validate();
    cnn_lstm.validate_grid(grid_height, grid_width);
  }
  if (gbdt_enabled) gbdt.validate();
  if (lasso_enabled) lasso.validate();
  if (!(split.val_fraction > 0.0 && split.val_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "split.val_fraction must lie in (0, 1)");
  }
  if (explain.k < 1) throw Error(ErrorCode::InvalidConfig, "explain.k must be >= 1");
  if (evaluate.n_bins < 1) throw Error(ErrorCode::InvalidConfig, "evaluate.n_bins must be >= 1");
  if (!cnn_lstm_enabled && !gbdt_enabled && !lasso_enabled) {
    throw Error(ErrorCode::InvalidConfig, "no model is enabled");
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorCode::InvalidConfig, "override '" + assignment + "' is not of the form key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(ErrorCode::InvalidConfig, "override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw Error(ErrorCode::InvalidConfig, "override key '" + key + "' crosses a non-object");
      *node = json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

json load_config_json(const fs::path& path, const std::vector<std::string>& overrides) {
  json j;
  try {
    j = detail::read_json_file(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return j;
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  RunConfig c;
  try {
    check_keys(j, {"input", "output_dir", "grid", "window", "models", "split", "explain", "evaluate"}, "");

    const json in = section(j, "input");
    check_keys(in, {"csv", "schema", "scene"}, "input");
    if (in.contains("csv")) {
      fs::path p = in.at("csv").get<std::string>();
      c.input.csv = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    }
    if (in.contains("schema")) {
      const json s = in.at("schema");
      check_keys(s, {"id_column", "easting_column", "northing_column", "first_displacement_column",
                     "displacement_count"},
                 "input.schema");
      c.input.schema.id_column = s.value("id_column", c.input.schema.id_column);
      c.input.schema.easting_column = s.value("easting_column", c.input.schema.easting_column);
      c.input.schema.northing_column = s.value("northing_column", c.input.schema.northing_column);
      c.input.schema.first_displacement_column =
          s.value("first_displacement_column", c.input.schema.first_displacement_column);
      if (s.contains("displacement_count")) c.input.schema.displacement_count = s.at("displacement_count").get<std::size_t>();
    }
    if (in.contains("scene")) {
      check_keys(in.at("scene"), {"n_points", "extent", "t_steps", "bowls", "trend", "noise_std", "seed",
                                  "origin_easting", "origin_northing", "start_date", "epoch_spacing_days"},
                 "input.scene");
      c.input.scene = in.at("scene").get<synth::SceneConfig>();
    }

    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();

    const json g = section(j, "grid");
    check_keys(g, {"height", "width"}, "grid");
    c.grid_height = g.value("height", c.grid_height);
    c.grid_width = g.value("width", c.grid_width);

    const json w = section(j, "window");
    check_keys(w, {"input_start", "input_len", "target_index"}, "window");
    c.window.input_start = w.value("input_start", c.window.input_start);
    c.window.input_len = w.value("input_len", c.window.input_len);
    c.window.target_index = w.value("target_index", c.window.input_start + c.window.input_len);

    const json models = section(j, "models");
    check_keys(models, {"cnn_lstm", "gbdt", "lasso"}, "models");
    const json nn_j = section(models, "cnn_lstm");
    check_keys(nn_j, {"enabled", "conv_channels", "kernel_size", "pool_factor", "lstm_hidden", "learning_rate",
                      "epochs", "seed"},
               "models.cnn_lstm");
    c.cnn_lstm_enabled = nn_j.value("enabled", true);
    c.cnn_lstm = nn_j.get<nn::CnnLstmConfig>();
    const json gb = section(models, "gbdt");
    check_keys(gb, {"enabled", "num_leaves", "max_depth", "shrinkage", "min_samples_leaf", "max_rounds", "patience"},
               "models.gbdt");
    c.gbdt_enabled = gb.value("enabled", true);
    c.gbdt = gb.get<tabular::GbdtConfig>();
    const json la = section(models, "lasso");
    check_keys(la, {"enabled", "alpha", "learning_rate", "epochs", "seed"}, "models.lasso");
    c.lasso_enabled = la.value("enabled", true);
    c.lasso = la.get<tabular::LassoConfig>();

    const json sp = section(j, "split");
    check_keys(sp, {"val_fraction", "seed"}, "split");
    c.split.val_fraction = sp.value("val_fraction", c.split.val_fraction);
    c.split.seed = sp.value("seed", c.split.seed);

    const json ex = section(j, "explain");
    check_keys(ex, {"enabled", "k", "seed"}, "explain");
    c.explain.enabled = ex.value("enabled", c.explain.enabled);
    c.explain.k = ex.value("k", c.explain.k);
    c.explain.seed = ex.value("seed", c.explain.seed);

    const json ev = section(j, "evaluate");
    check_keys(ev, {"n_bins", "heatmap_range"}, "evaluate");
    c.evaluate.n_bins = ev.value("n_bins", c.evaluate.n_bins);
    c.evaluate.heatmap_range = ev.value("heatmap_range", c.evaluate.heatmap_range);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  json input = json::object();
  if (c.input.csv) {
    input["csv"] = c.input.csv->string();
    json schema = {{"id_column", c.input.schema.id_column},
                   {"easting_column", c.input.schema.easting_column},
                   {"northing_column", c.input.schema.northing_column},
                   {"first_displacement_column", c.input.schema.first_displacement_column}};
    if (c.input.schema.displacement_count) schema["displacement_count"] = *c.input.schema.displacement_count;
    input["schema"] = std::move(schema);
  }
  if (c.input.scene) input["scene"] = *c.input.scene;
  json nn_j = c.cnn_lstm;
  nn_j["enabled"] = c.cnn_lstm_enabled;
  json gb = c.gbdt;
  gb["enabled"] = c.gbdt_enabled;
  json la = c.lasso;
  la["enabled"] = c.lasso_enabled;
  return {{"input", std::move(input)},
          {"output_dir", c.output_dir.string()},
          {"grid", {{"height", c.grid_height}, {"width", c.grid_width}}},
          {"window",
           {{"input_start", c.window.input_start},
            {"input_len", c.window.input_len},
            {"target_index", c.window.target_index}}},
          {"models", {{"cnn_lstm", std::move(nn_j)}, {"gbdt", std::move(gb)}, {"lasso", std::move(la)}}},
          {"split", {{"val_fraction", c.split.val_fraction}, {"seed", c.split.seed}}},
          {"explain", {{"enabled", c.explain.enabled}, {"k", c.explain.k}, {"seed", c.explain.seed}}},
          {"evaluate", {{"n_bins", c.evaluate.n_bins}, {"heatmap_range", c.evaluate.heatmap_range}}}};
}

// --- Stages -------------------------------------------------------------------

void run_ingest(const RunConfig& c, std::ostream& log) {
  c.validate();
  fs::create_directories(c.output_dir);
  ingest::PointSet points;
  if (c.input.scene) {
    points = synth::generate_scene(*c.input.scene).points();
    log << "[ingest] generated " << points.size() << " points x " << points.series_length() << " epochs\n";
  } else {
    points = ingest::parse_csv(*c.input.csv, c.input.schema);
    log << "[ingest] read " << points.size() << " points x " << points.series_length() << " epochs from "
        << c.input.csv->string() << "\n";
  }
  ingest::validate(points);
  ingest::write_csv(points, out(c, "points.csv"));
  log << "[ingest] -> points.csv\n";
}

void run_grid(const RunConfig& c, std::ostream& log) {
  c.validate();
  ingest::CsvSchema schema;
  schema.id_column = "point_id";
  const auto points = ingest::parse_csv(out(c, "points.csv"), schema);
  ingest::validate(points);
  ingest::check_window(c.window, points.series_length());
  const auto spec = grid::build_grid_spec(points, c.grid_height, c.grid_width);
  std::vector<std::size_t> epochs;
  for (std::size_t e = 0; e < c.window.input_len; ++e) epochs.push_back(c.window.input_start + e);
  epochs.push_back(c.window.target_index);
  auto all = grid::grid_epochs(points, spec, epochs);

  std::vector<std::string> labels;
  for (const std::size_t e : epochs) labels.push_back(e < points.epoch_labels.size() ? points.epoch_labels[e] : std::to_string(e));
  grid::SpatioTemporalTensor target{spec, {all.steps.back()}};
  all.steps.pop_back();
  const std::string target_label = labels.back();
  labels.pop_back();
  grid::write_tensor(all, labels, out(c, "tensor"));
  grid::write_tensor(target, {target_label}, out(c, "target"));
  log << "[grid] " << c.window.input_len << " x " << spec.height << " x " << spec.width << " tensor -> tensor.f32, "
      << "target epoch " << target_label << " -> target.f32\n";
}

void run_train_nn(const RunConfig& c, std::ostream& log) {
  c.validate();
  if (!c.cnn_lstm_enabled) {
    log << "[train-nn] cnn_lstm disabled; skipped\n";
    return;
  }
  const auto g = load_gridded(c);
  const auto result = nn::train(c.cnn_lstm, g.x, g.y);
  nn::write_checkpoint(c.cnn_lstm, result.params, out(c, "cnn_lstm.ckpt"));
  detail::write_json_file(out(c, "history_cnn_lstm.json"), {{"loss", result.history.loss}});
  log << "[train-nn] " << c.cnn_lstm.epochs << " epochs, final loss "
      << (result.history.loss.empty() ? 0.0 : result.history.loss.back()) << " -> cnn_lstm.ckpt\n";
}

void run_train_gbdt(const RunConfig& c, std::ostream& log) {
  c.validate();
  if (!c.gbdt_enabled) {
    log << "[train-gbdt] gbdt disabled; skipped\n";
    return;
  }
  const auto g = load_gridded(c);
  const auto data = split_table(c, g);
  write_split(c, data.split, log);
  tabular::BoostingHistory history;
  const auto model = tabular::gbdt_train(data.split.train, data.split.val, c.gbdt, &history);
  tabular::save_ensemble(model, out(c, "gbdt.json"));
  detail::write_json_file(out(c, "history_gbdt.json"), {{"train_mse", history.train_mse},
                                                         {"val_mse", history.val_mse},
                                                         {"best_round", history.best_round},
                                                         {"rounds_run", history.rounds_run}});
  log << "[train-gbdt] best round " << history.best_round << " of " << history.rounds_run << " -> gbdt.json\n";
}

void run_train_lasso(const RunConfig& c, std::ostream& log) {
  c.validate();
  if (!c.lasso_enabled) {
    log << "[train-lasso] lasso disabled; skipped\n";
    return;
  }
  const auto g = load_gridded(c);
  const auto data = split_table(c, g);
  write_split(c, data.split, log);
  const auto model = tabular::lasso_train(data.split.train, c.lasso);
  tabular::save_linear_model(model, out(c, "lasso.json"));
  const auto zeros = std::count(model.weights.begin(), model.weights.end(), 0.0);
  log << "[train-lasso] alpha " << c.lasso.alpha << ", " << zeros << " of " << model.weights.size()
      << " weights exactly zero -> lasso.json\n";
}

void run_predict(const RunConfig& c, std::ostream& log) {
  c.validate();
  const auto g = load_gridded(c);
  const std::string label = grid::read_tensor(out(c, "target")).epoch_labels.at(0);
  const std::size_t epoch = g.y.epoch_index;
  if (c.cnn_lstm_enabled) {
    const auto ckpt = nn::read_checkpoint(out(c, "cnn_lstm.ckpt"));
    write_prediction(c, "cnn_lstm", nn::forward(ckpt.params, g.x), label, log);
  }
  if (c.gbdt_enabled || c.lasso_enabled) {
    const auto table = tabular::tensor_to_table(g.x, g.y);
    if (c.gbdt_enabled) {
      const auto pred = tabular::gbdt_predict(tabular::load_ensemble(out(c, "gbdt.json")), table.x);
      write_prediction(c, "gbdt", tabular::table_to_map({pred.data(), table.rows()}, g.x.spec, epoch), label, log);
    }
    if (c.lasso_enabled) {
      const auto pred = tabular::lasso_predict(tabular::load_linear_model(out(c, "lasso.json")), table.x);
      write_prediction(c, "lasso", tabular::table_to_map({pred.data(), table.rows()}, g.x.spec, epoch), label, log);
    }
  }
}

void run_evaluate(const RunConfig& c, std::ostream& log) {
  c.validate();
  const auto g = load_gridded(c);
  std::vector<evaluate::NamedMap> maps;
  std::vector<std::size_t> validation;
  if (c.gbdt_enabled || c.lasso_enabled) validation = read_validation_pixels(c);
  for (const std::string name : kModelNames) {
    if (!model_enabled(c, name)) continue;
    auto stored = grid::read_tensor(out(c, "pred_" + name));
    evaluate::NamedMap m{name, std::move(stored.tensor.steps.at(0)), {}};
    if (name != "cnn_lstm") m.validation_pixels = validation;
    maps.push_back(std::move(m));
  }
  evaluate::ReportOptions options;
  options.n_bins = c.evaluate.n_bins;
  options.heatmap_range = c.evaluate.heatmap_range;
  const auto report = evaluate::build_report(g.y, maps, options, c.output_dir);
  for (const auto& m : report.models) {
    log << "[evaluate] " << m.name << ": rmse " << m.full.rmse << " mse " << m.full.mse << " r2 " << m.full.r2 << "\n";
  }
  log << "[evaluate] -> metrics.json\n";
}

void run_explain(const RunConfig& c, std::ostream& log) {
  c.validate();
  if (!c.explain.enabled || !c.gbdt_enabled) {
    log << "[explain] disabled (needs explain.enabled and the gbdt model); skipped\n";
    return;
  }
  const auto g = load_gridded(c);
  const auto table = tabular::tensor_to_table(g.x, g.y);
  const auto model = tabular::load_ensemble(out(c, "gbdt.json"));
  const auto report = explain::explain_rows(model, table.x, c.explain.k, c.explain.seed);
  explain::write_shap_report(report, c.output_dir);

  // Force decomposition for the explained row with the largest |prediction - base|.
  std::size_t pick = 0;
  double widest = -1.0;
  for (std::size_t i = 0; i < report.rows(); ++i) {
    const double d = std::abs(report.prediction(i) - report.base_value);
    if (d > widest) {
      widest = d;
      pick = i;
    }
  }
  const auto force = explain::force_decomposition(report, pick);
  json contributions = json::array();
  for (const auto& ct : force.contributions) {
    contributions.push_back({{"feature", ct.feature}, {"value", ct.value}, {"phi", ct.phi},
                             {"direction", explain::to_string(ct.direction)}});
  }
  detail::write_json_file(out(c, "shap_force.json"), {{"pixel", report.row_indices[pick]},
                                                      {"base_value", force.base_value},
                                                      {"prediction", force.prediction},
                                                      {"contributions", std::move(contributions)}});
  const auto summary = explain::shap_summary(report);
  log << "[explain] K=" << report.rows() << ", top feature " << summary.front().feature << " (mean |phi| "
      << summary.front().mean_abs_phi << ") -> shap_phi.csv\n";
}

void run_pipeline(const RunConfig& c, std::ostream& log) {
  run_stage("config", [&] { c.validate(); });
  run_stage("ingest", [&] { run_ingest(c, log); });
  run_stage("grid", [&] { run_grid(c, log); });
  run_stage("train-nn", [&] { run_train_nn(c, log); });
  run_stage("train-gbdt", [&] { run_train_gbdt(c, log); });
  run_stage("train-lasso", [&] { run_train_lasso(c, log); });
  run_stage("predict", [&] { run_predict(c, log); });
  run_stage("evaluate", [&] { run_evaluate(c, log); });
  run_stage("explain", [&] { run_explain(c, log); });
}

std::vector<MemoryRow> memory_study(const std::vector<std::size_t>& steps, const std::vector<std::size_t>& resolutions) {
  std::vector<MemoryRow> rows;
  for (const std::size_t t : steps) {
    for (const std::size_t r : resolutions) rows.push_back({t, r, r, grid::estimate_memory(t, r, r)});
  }
  return rows;
}

}  // namespace deformcast::pipeline
