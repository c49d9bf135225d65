// Command-line front end: one subcommand per pipeline stage plus the full run.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deformcast/error.hpp"
#include "deformcast/ingest.hpp"
#include "deformcast/pipeline.hpp"
#include "deformcast/synth.hpp"

namespace fs = std::filesystem;
namespace pl = deformcast::pipeline;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", args.overrides, "override a config key, e.g. --set models.gbdt.max_depth=4")
      ->type_name("KEY=VALUE");
}

pl::RunConfig load(const ConfigArgs& args) {
  const auto j = pl::load_config_json(args.path, args.overrides);
  return pl::parse_run_config(j, fs::path(args.path).parent_path());
}

int report_failure(const std::string& stage, const std::string& what) {
  std::cerr << "deformcast: stage '" << stage << "' failed: " << what << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gridding, forecasting, evaluation and attribution for InSAR displacement time series"};
  app.require_subcommand(1);

  ConfigArgs pipeline_args, grid_args, nn_args, gbdt_args, lasso_args, predict_args, evaluate_args, explain_args,
      synth_args;
  auto* pipeline_cmd = app.add_subcommand("pipeline", "run every stage: grid, train, predict, evaluate, explain");
  add_config_options(pipeline_cmd, pipeline_args);

  auto* synth_cmd = app.add_subcommand("synth", "generate the configured synthetic scene as a point CSV");
  add_config_options(synth_cmd, synth_args);
  std::string synth_out;
  synth_cmd->add_option("-o,--out", synth_out, "CSV path (default: <output_dir>/points.csv)");

  struct Stage {
    CLI::App* cmd;
    ConfigArgs* args;
    void (*run)(const pl::RunConfig&, std::ostream&);
  };
  auto stage = [&](const char* name, const char* help, ConfigArgs& args, void (*run)(const pl::RunConfig&, std::ostream&)) {
    auto* cmd = app.add_subcommand(name, help);
    add_config_options(cmd, args);
    return Stage{cmd, &args, run};
  };
  const std::vector<Stage> stages = {
      stage("train-nn", "train the CNN-LSTM on the gridded tensor", nn_args, pl::run_train_nn),
      stage("train-gbdt", "train the gradient-boosted trees", gbdt_args, pl::run_train_gbdt),
      stage("train-lasso", "train the L1-regularized linear model", lasso_args, pl::run_train_lasso),
      stage("predict", "predict the target map with every enabled model", predict_args, pl::run_predict),
      stage("evaluate", "write metrics, residual statistics and heatmaps", evaluate_args, pl::run_evaluate),
      stage("explain", "compute TreeSHAP attributions for the trees", explain_args, pl::run_explain),
  };
  auto* grid_cmd = app.add_subcommand("grid", "ingest the input and interpolate the tensor and target map");
  add_config_options(grid_cmd, grid_args);

  auto* memory_cmd = app.add_subcommand("memory-study", "print float32 tensor sizes for given shapes");
  std::vector<std::size_t> steps{300};
  std::vector<std::size_t> resolutions{128, 256, 512};
  memory_cmd->add_option("-t,--steps", steps, "time steps")->delimiter(',');
  memory_cmd->add_option("-r,--resolutions", resolutions, "square grid sizes")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::string current = "config";
  try {
    if (*memory_cmd) {
      std::printf("%6s %6s %6s %10s\n", "T", "H", "W", "MiB");
      for (const auto& r : pl::memory_study(steps, resolutions)) {
        std::printf("%6zu %6zu %6zu %10.2f\n", r.t, r.h, r.w, r.mib);
      }
      return 0;
    }
    if (*pipeline_cmd) {
      const auto config = load(pipeline_args);
      pl::run_pipeline(config, std::cout);
      std::cout << "[pipeline] done -> " << config.output_dir.string() << "\n";
      return 0;
    }
    if (*synth_cmd) {
      const auto config = load(synth_args);
      if (!config.input.scene) {
        throw deformcast::Error(deformcast::ErrorCode::InvalidConfig, "synth needs input.scene in the config");
      }
      current = "synth";
      const fs::path target = synth_out.empty() ? config.output_dir / "points.csv" : fs::path(synth_out);
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      const auto scene = deformcast::synth::generate_scene(*config.input.scene);
      deformcast::ingest::write_csv(scene.points(), target);
      std::cout << "[synth] " << scene.points().size() << " points -> " << target.string() << "\n";
      return 0;
    }
    if (*grid_cmd) {
      const auto config = load(grid_args);
      current = "ingest";
      pl::run_ingest(config, std::cout);
      current = "grid";
      pl::run_grid(config, std::cout);
      return 0;
    }
    for (const auto& s : stages) {
      if (!*s.cmd) continue;
      const auto config = load(*s.args);
      current = s.cmd->get_name();
      s.run(config, std::cout);
      return 0;
    }
  } catch (const pl::StageError& e) {
    return report_failure(e.stage(), e.what());
  } catch (const std::exception& e) {
    return report_failure(current, e.what());
  }
  return 1;
}
