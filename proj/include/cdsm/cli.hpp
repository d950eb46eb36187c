// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Argument parsing and exit-code mapping for the `cdsm` tool.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 usage or config error,
// 3 file I/O or parse error, 4 missing data or checkpoint,
// 5 non-finite gradient during training.

#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "cdsm/runner.hpp"

namespace cdsm::cli {

inline std::filesystem::path default_run_root() {
  const char* env = std::getenv("CDSM_RUN_ROOT");
  return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::path("runs");
}

inline model::Regime parse_regime(const std::string& s) {
  try {
    return model::regime_from_string(s);
  } catch (const std::invalid_argument& e) {
    throw run::ConfigError(e.what());
  }
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Camera-radar BEV detection experiments"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::string config_path, run_name = "default", run_root = default_run_root().string();
  std::string regime_name, split = "test", checkpoint, only;
  std::string camera_ckpt, radar_ckpt, frozen_ckpt;
  int threads = 0, epochs = 0, limit = 4;
  bool quiet = false;

  auto common = [&](CLI::App* c, bool needs_config) {
    auto* opt = c->add_option("-c,--config", config_path, "Experiment config (JSON)");
    if (needs_config) {
      opt->required();
    }
    c->add_option("-r,--run", run_name, "Run name under the run root")->capture_default_str();
    c->add_option("--run-root", run_root, "Run root directory (env CDSM_RUN_ROOT)")->capture_default_str();
    c->add_flag("-q,--quiet", quiet, "Suppress progress lines");
  };
  auto regime_opt = [&](CLI::App* c) {
    c->add_option("--regime", regime_name, "cam2d, cam3d, radar3d, fusion_frozen or fusion_finetune")->required();
  };
  auto split_opt = [&](CLI::App* c) {
    c->add_option("--split", split, "train, val or test")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
  };

  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic train/val/test splits");
  common(synth_cmd, true);
  auto* prep_cmd = app.add_subcommand("preprocess", "Clip point clouds and letterbox images of every split");
  common(prep_cmd, true);
  auto* train_cmd = app.add_subcommand("train", "Train one regime and write its checkpoint and epoch log");
  common(train_cmd, true);
  regime_opt(train_cmd);
  train_cmd->add_option("--camera-ckpt", camera_ckpt, "cam3d checkpoint for fusion_frozen");
  train_cmd->add_option("--radar-ckpt", radar_ckpt, "radar3d checkpoint for fusion_frozen");
  train_cmd->add_option("--frozen-ckpt", frozen_ckpt, "fusion_frozen checkpoint for fusion_finetune");
  train_cmd->add_option("--threads", threads, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);
  train_cmd->add_option("--epochs", epochs, "Maximum epochs (overrides the config)")->check(CLI::PositiveNumber);
  auto* infer_cmd = app.add_subcommand("infer", "Write per-scene detections");
  common(infer_cmd, true);
  regime_opt(infer_cmd);
  split_opt(infer_cmd);
  infer_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (default: the run's own)");
  auto* eval_cmd = app.add_subcommand("eval", "Score detections against labels");
  common(eval_cmd, true);
  regime_opt(eval_cmd);
  split_opt(eval_cmd);
  std::string preset = "desk";
  auto* config_cmd = app.add_subcommand("config", "Print a preset experiment config");
  config_cmd->add_option("--preset", preset, "default or desk")
      ->check(CLI::IsMember({"default", "desk"}))
      ->capture_default_str();
  auto* stats_cmd = app.add_subcommand("stats", "Print label statistics of a split");
  common(stats_cmd, false);
  split_opt(stats_cmd);
  auto* render_cmd = app.add_subcommand("render", "Draw camera and BEV plots of detections");
  common(render_cmd, true);
  regime_opt(render_cmd);
  split_opt(render_cmd);
  render_cmd->add_option("--limit", limit, "Scenes to draw, 0 for all")->capture_default_str();
  render_cmd->add_option("--scene", only, "Draw only this scene id");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? run::kOk : run::kUsage;
  }

  const run::Logger log = [&](const std::string& line) {
    if (!quiet) {
      out << line << '\n';
    }
  };
  std::vector<std::string> args(argv + 1, argv + argc);
  const std::filesystem::path run_dir = std::filesystem::path(run_root) / run_name;

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    if (name == "config") {
      out << nlohmann::json(preset == "desk" ? desk_experiment() : ExperimentConfig{}).dump(2) << '\n';
      return run::kOk;
    }
    if (name == "stats") {
      ExperimentConfig c;
      if (!config_path.empty()) {
        c = run::Run::open(run_dir, config_path).config();
      }
      const run::Run r(run_dir, c);
      out << run::stats(r, split).dump(2) << '\n';
      return run::kOk;
    }
    const run::Run r = run::Run::open(run_dir, config_path);
    r.record(name, args);
    if (name == "synth") {
      run::synth(r, log);
    } else if (name == "preprocess") {
      run::preprocess(r, log);
    } else if (name == "train") {
      run::TrainOptions o;
      o.regime = parse_regime(regime_name);
      o.pretrained = {camera_ckpt, radar_ckpt, frozen_ckpt};
      if (threads > 0) o.threads = threads;
      if (epochs > 0) o.epochs = epochs;
      run::train_regime(r, o, log);
    } else if (name == "infer") {
      run::infer(r, parse_regime(regime_name), split, checkpoint, log);
    } else if (name == "eval") {
      run::evaluate(r, parse_regime(regime_name), split, log);
    } else if (name == "render") {
      run::render_run(r, parse_regime(regime_name), split, limit, only, log);
    }
    return run::kOk;
  } catch (const run::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return run::kUsage;
  } catch (const train::NonFiniteGradient& e) {
    err << "training diverged: " << e.what() << '\n';
    return run::kNumeric;
  } catch (const train::MissingCheckpoint& e) {
    err << "missing checkpoint: " << e.what() << '\n';
    return run::kData;
  } catch (const run::DataError& e) {
    err << "data error: " << e.what() << '\n';
    return run::kData;
  } catch (const data::SceneParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return run::kIo;
  } catch (const nn::CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return run::kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return run::kIo;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << '\n';
    return run::kData;
  } catch (const std::runtime_error& e) {
    err << "error: " << e.what() << '\n';
    return run::kIo;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return run::kFailure;
  }
}

}  // namespace cdsm::cli
