// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run-directory commands behind the `cdsm` tool. A run directory holds
//
//   manifest.json                      config, hash, seed, version, commands
//   data/<split>/scene_NNNNN.{json,ppm}
//   preprocessed/<split>/...           optional, used by later steps if present
//   checkpoints/<regime>.ckpt
//   logs/<regime>.jsonl                one line per epoch plus a summary line
//   detections/<regime>/<split>/<scene>.json
//   eval/<regime>_<split>.json, eval/<regime>_<split>_pr.svg
//   render/<regime>/<scene>_camera.ppm, <scene>_bev.ppm

#pragma once

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdsm/dataio.hpp"
#include "cdsm/experiment.hpp"
#include "cdsm/render.hpp"
#include "cdsm/synth.hpp"
#include "cdsm/train.hpp"
#include "cdsm/version.hpp"

namespace cdsm::run {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kSplits[] = {"train", "val", "test"};

/// Bad flags or an invalid/mismatched config.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data is missing or inconsistent (empty split, absent detections).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIo = 3,
  kData = 4,
  kNumeric = 5,
};

inline void check_split(const std::string& split) {
  for (const char* s : kSplits) {
    if (split == s) {
      return;
    }
  }
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

inline void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) {
    throw std::runtime_error("cannot write " + path.string());
  }
  os << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw std::runtime_error("cannot open " + path.string());
  }
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

/// An experiment config bound to one run directory.
class Run {
 public:
  Run(fs::path dir, ExperimentConfig cfg) : dir_(std::move(dir)), cfg_(std::move(cfg)) {
    json j = cfg_;
    hash_ = config_hash(j);
  }

  static Run open(const fs::path& dir, const fs::path& config_path) {
    ExperimentConfig c;
    try {
      c = load_experiment(config_path);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(config_path.string() + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(config_path.string() + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw ConfigError(e.what());
    }
    return Run(dir, std::move(c));
  }

  const fs::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }

  fs::path data_dir() const { return dir_ / "data"; }
  fs::path preprocessed_dir() const { return dir_ / "preprocessed"; }
  fs::path checkpoint(model::Regime r) const { return dir_ / "checkpoints" / (model::to_string(r) + ".ckpt"); }
  fs::path log_file(model::Regime r) const { return dir_ / "logs" / (model::to_string(r) + ".jsonl"); }
  fs::path detections_dir(model::Regime r, const std::string& split) const {
    return dir_ / "detections" / model::to_string(r) / split;
  }
  fs::path eval_file(model::Regime r, const std::string& split) const {
    return dir_ / "eval" / (model::to_string(r) + "_" + split + ".json");
  }
  fs::path render_dir(model::Regime r) const { return dir_ / "render" / model::to_string(r); }

  /// Creates or extends manifest.json. A manifest written under a different
  /// config is an error.
  void record(const std::string& command, const std::vector<std::string>& args) const {
    const fs::path path = dir_ / "manifest.json";
    json m;
    if (fs::exists(path)) {
      m = read_json(path);
      if (m.value("config_hash", "") != hash_) {
        throw ConfigError("run directory " + dir_.string() + " was created with config " +
                          m.value("config_hash", std::string("?")) + ", not " + hash_);
      }
    } else {
      m = {{"format", "cdsm-run"},
           {"version", kVersion},
           {"config_hash", hash_},
           {"seed", cfg_.train.seed},
           {"data_seed", cfg_.data.seed},
           {"config", json(cfg_)},
           {"commands", json::array()}};
    }
    m["commands"].push_back({{"command", command}, {"args", args}, {"version", kVersion}});
    write_json(path, m);
  }

  /// Scenes of a split, from preprocessed/ when present, else data/.
  std::vector<data::Scene> scenes(const std::string& split) const {
    check_split(split);
    const fs::path root = fs::is_directory(preprocessed_dir() / split) ? preprocessed_dir() : data_dir();
    auto out = data::load_split(root, split);
    if (out.empty()) {
      throw DataError("no scenes in " + (root / split).string() + " (run `cdsm synth` first)");
    }
    return out;
  }

 private:
  fs::path dir_;
  ExperimentConfig cfg_;
  std::string hash_;
};

inline std::string scene_id(int index) {
  std::ostringstream os;
  os << "scene_" << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

inline int split_size(const DataConfig& d, const std::string& split) {
  return split == "train" ? d.train_scenes : split == "val" ? d.val_scenes : d.test_scenes;
}

// ---------------------------------------------------------------------------
// Commands. `log` receives one human-readable line per step.

using Logger = std::function<void(const std::string&)>;

inline void synth(const Run& run, const Logger& log) {
  const auto& c = run.config();
  for (const char* split : kSplits) {
    const int n = split_size(c.data, split);
    for (int i = 0; i < n; ++i) {
      const auto scene = data::generate_synthetic_scene(c.data.scene_seed(split, i), c.synth, scene_id(i));
      data::save_scene(scene, run.data_dir() / split);
    }
    log(std::string(split) + ": " + std::to_string(n) + " scenes");
  }
}

inline void preprocess(const Run& run, const Logger& log) {
  const auto& m = run.config().model;
  for (const char* split : kSplits) {
    const auto in = data::load_split(run.data_dir(), split);
    for (const auto& s : in) {
      data::save_scene(data::preprocess_scene(s, m.fov, m.image_width, m.image_height),
                       run.preprocessed_dir() / split);
    }
    log(std::string(split) + ": " + std::to_string(in.size()) + " scenes");
  }
}

struct TrainOptions {
  model::Regime regime = model::Regime::Cam2d;
  train::PretrainedPaths pretrained;
  std::optional<int> threads;
  std::optional<int> epochs;
};

/// Fills unset pretrained paths with the run's own checkpoints.
inline train::PretrainedPaths default_pretrained(const Run& run, train::PretrainedPaths p) {
  if (p.camera.empty()) p.camera = run.checkpoint(model::Regime::Cam3d);
  if (p.radar.empty()) p.radar = run.checkpoint(model::Regime::Radar3d);
  if (p.frozen.empty()) p.frozen = run.checkpoint(model::Regime::FusionFrozen);
  return p;
}

inline train::TrainResult train_regime(const Run& run, const TrainOptions& opt, const Logger& log) {
  const auto& c = run.config();
  train::TrainConfig tc = c.train_for(opt.regime);
  if (opt.threads) tc.threads = *opt.threads;
  if (opt.epochs) tc.epochs = *opt.epochs;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  model::Model m = model::Model::create(c.model, opt.regime, tc.seed);
  train::load_pretrained(m, default_pretrained(run, opt.pretrained));

  const auto train_set = train::prepare_all(m, run.scenes("train"));
  std::vector<model::Sample> val_set;
  if (c.data.val_scenes > 0) {
    val_set = train::prepare_all(m, run.scenes("val"));
  }

  const fs::path log_path = run.log_file(opt.regime);
  fs::create_directories(log_path.parent_path());
  std::ofstream os(log_path);
  if (!os) {
    throw std::runtime_error("cannot write " + log_path.string());
  }
  os << std::setprecision(17);
  const auto res = train::train(m, train_set, val_set, tc, [&](const train::EpochLog& e) {
    os << json(e).dump() << '\n';
    std::ostringstream line;
    line << "epoch " << e.epoch << " lr " << e.lr << " train " << e.train_loss << " val " << e.val_loss
         << (e.improved ? " *" : "");
    log(line.str());
  });
  os << json{{"summary", true},
             {"best_epoch", res.best_epoch},
             {"best_val", res.best_val},
             {"epochs_run", res.log.size()},
             {"stopped_early", res.stopped_early}}
            .dump()
     << '\n';
  fs::create_directories(run.checkpoint(opt.regime).parent_path());
  nn::save_checkpoint(m.params(), run.checkpoint(opt.regime));
  return res;
}

/// The trained model of a regime; `ckpt` overrides the run's checkpoint.
inline model::Model load_model(const Run& run, model::Regime regime, const fs::path& ckpt = {}) {
  const fs::path path = ckpt.empty() ? run.checkpoint(regime) : ckpt;
  if (!fs::exists(path)) {
    throw train::MissingCheckpoint("no checkpoint for " + model::to_string(regime) + " at " + path.string() +
                                   " (run `cdsm train --regime " + model::to_string(regime) + "` first)");
  }
  model::Model m = model::Model::create(run.config().model, regime, run.config().train.seed);
  const nn::ParamStore src = nn::load_checkpoint(path);
  if (m.params().load_matching(src) != m.params().size()) {
    throw nn::CheckpointError(path.string() + " does not match the " + model::to_string(regime) + " model");
  }
  return m;
}

inline std::size_t infer(const Run& run, model::Regime regime, const std::string& split, const fs::path& ckpt,
                         const Logger& log) {
  const model::Model m = load_model(run, regime, ckpt);
  const auto samples = train::prepare_all(m, run.scenes(split));
  const fs::path dir = run.detections_dir(regime, split);
  fs::create_directories(dir);
  for (const auto& s : samples) {
    det::save_detections(m.detect(s, run.config().inference), dir / (s.id + ".json"));
  }
  log(split + ": " + std::to_string(samples.size()) + " scenes -> " + dir.string());
  return samples.size();
}

inline std::vector<det::SceneDetections> load_detections(const Run& run, model::Regime regime,
                                                         const std::string& split,
                                                         const std::vector<model::Sample>& samples) {
  std::vector<det::SceneDetections> out;
  const fs::path dir = run.detections_dir(regime, split);
  for (const auto& s : samples) {
    const fs::path p = dir / (s.id + ".json");
    if (!fs::exists(p)) {
      throw DataError("missing detections " + p.string() + " (run `cdsm infer` first)");
    }
    out.push_back(det::detections_from_json(read_json(p)));
  }
  return out;
}

/// Model with random weights; only its label preparation is used.
inline model::Model label_model(const Run& run, model::Regime regime) {
  return model::Model::create(run.config().model, regime, run.config().train.seed);
}

inline eval::EvalReport evaluate(const Run& run, model::Regime regime, const std::string& split, const Logger& log) {
  const model::Model m = label_model(run, regime);
  const auto samples = train::prepare_all(m, run.scenes(split));
  const auto dets = load_detections(run, regime, split, samples);
  const eval::EvalReport rep = train::evaluate(m, samples, dets);
  json j = eval::to_json(rep, true);
  j["regime"] = model::to_string(regime);
  j["split"] = split;
  j["config_hash"] = run.hash();
  const fs::path out = run.eval_file(regime, split);
  write_json(out, j);
  fs::path svg = out;
  svg.replace_filename(out.stem().string() + "_pr.svg");
  std::ofstream(svg) << eval::pr_curve_svg(rep);
  std::ostringstream line;
  line << "mAP " << rep.map;
  for (const auto& r : rep.results) {
    line << "  " << r.spec.name() << " " << r.ap.ap;
  }
  log(line.str());
  return rep;
}

inline json stats(const Run& run, const std::string& split) { return data::to_json(data::dataset_stats(run.scenes(split))); }

struct RenderedScene {
  data::Image camera;
  std::optional<data::Image> bev;
};

/// Camera overlay (and BEV for 3D regimes) of one prepared scene.
inline RenderedScene render_scene(const model::ModelConfig& mc, det::Kind kind, const data::Scene& scene,
                                  const model::Sample& s, const det::SceneDetections& d, double bev_scale = 8.0) {
  const data::Scene view = data::preprocess_scene(scene, mc.fov, mc.image_width, mc.image_height);
  RenderedScene out;
  if (kind == det::Kind::Box2d) {
    const auto match = eval::associate(d.boxes2d, s.boxes2d, eval::iou20());
    out.camera = render::camera_overlay_2d(view, d.boxes2d, s.boxes2d, match);
  } else {
    const auto match = eval::associate(d.boxes3d, s.eval3d, eval::dist(2.0));
    out.camera = render::camera_overlay_3d(view, d.boxes3d, s.eval3d, match);
    out.bev = render::bev_view(view, render::BevCanvas{mc.fov, bev_scale}, d.boxes3d, s.eval3d, match);
  }
  return out;
}

inline std::size_t render_run(const Run& run, model::Regime regime, const std::string& split, int limit,
                              const std::string& only, const Logger& log) {
  const model::Model m = label_model(run, regime);
  auto scenes = run.scenes(split);
  if (!only.empty()) {
    std::erase_if(scenes, [&](const data::Scene& s) { return s.id != only; });
    if (scenes.empty()) {
      throw DataError("no scene '" + only + "' in split " + split);
    }
  } else if (limit > 0 && static_cast<std::size_t>(limit) < scenes.size()) {
    scenes.resize(static_cast<std::size_t>(limit));
  }
  const auto samples = train::prepare_all(m, scenes);
  const auto dets = load_detections(run, regime, split, samples);
  const fs::path dir = run.render_dir(regime);
  fs::create_directories(dir);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto r = render_scene(run.config().model, m.kind(), scenes[i], samples[i], dets[i]);
    data::save_ppm(r.camera, dir / (scenes[i].id + "_camera.ppm"));
    if (r.bev) {
      data::save_ppm(*r.bev, dir / (scenes[i].id + "_bev.ppm"));
    }
  }
  log(std::to_string(scenes.size()) + " scenes -> " + dir.string());
  return scenes.size();
}

}  // namespace cdsm::run
