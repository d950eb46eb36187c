// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdsm/detector.hpp"
#include "cdsm/model.hpp"
#include "cdsm/synth.hpp"
#include "cdsm/train.hpp"

namespace cdsm {

/// Sizes and seeds of the generated splits.
struct DataConfig {
  int train_scenes = 128;
  int val_scenes = 8;
  int test_scenes = 200;
  std::uint64_t seed = 1;

  std::uint64_t scene_seed(const std::string& split, int index) const {
    const std::uint64_t base = split == "train" ? 0 : split == "val" ? 1 : 2;
    return nn::splitmix64(seed * 3 + base) + static_cast<std::uint64_t>(index);
  }
};

inline void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"train_scenes", c.train_scenes}, {"val_scenes", c.val_scenes}, {"test_scenes", c.test_scenes}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, DataConfig& c) {
  const DataConfig d;
  c.train_scenes = j.value("train_scenes", d.train_scenes);
  c.val_scenes = j.value("val_scenes", d.val_scenes);
  c.test_scenes = j.value("test_scenes", d.test_scenes);
  c.seed = j.value("seed", d.seed);
}

/// One experiment file: data generation, model shape, training and
/// inference settings. Unknown keys are rejected.
struct ExperimentConfig {
  data::SynthConfig synth;
  DataConfig data;
  model::ModelConfig model;
  train::TrainConfig train;
  double finetune_lr_scale = 1.0;  // fusion_finetune runs at train.lr * scale
  det::InferenceConfig inference;

  void validate() const {
    model.validate();
    train.validate();
    if (synth.image_width <= 0 || synth.image_height <= 0) {
      throw std::invalid_argument("synth: image size must be positive");
    }
    if (data.train_scenes < 1 || data.val_scenes < 0 || data.test_scenes < 1) {
      throw std::invalid_argument("data: need >= 1 train and test scene");
    }
    if (!(finetune_lr_scale > 0.0)) {
      throw std::invalid_argument("finetune_lr_scale must be > 0");
    }
  }

  /// Training settings for one regime.
  train::TrainConfig train_for(model::Regime r) const {
    train::TrainConfig t = train;
    t.regime = r;
    if (r == model::Regime::FusionFinetune) {
      t.lr *= finetune_lr_scale;
    }
    return t;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json inf;
  det::to_json(inf, c.inference);
  j = {{"synth", c.synth}, {"data", c.data},           {"model", c.model},
       {"train", c.train}, {"finetune_lr_scale", c.finetune_lr_scale}, {"inference", inf}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const char* kKeys[] = {"synth", "data", "model", "train", "finetune_lr_scale", "inference"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), k) == std::end(kKeys)) {
      throw std::invalid_argument("experiment config: unknown key '" + k + "'");
    }
  }
  const ExperimentConfig d;
  c.synth = j.value("synth", d.synth);
  c.data = j.value("data", d.data);
  c.model = j.value("model", d.model);
  c.train = j.value("train", d.train);
  c.finetune_lr_scale = j.value("finetune_lr_scale", d.finetune_lr_scale);
  c.inference = d.inference;
  if (j.contains("inference")) {
    det::from_json(j.at("inference"), c.inference);
  }
}

/// Desk-scale settings: 256x128 images, 2 m BEV cells, width-8 branches,
/// a raised learning rate, and camera depth noise with sparse radar.
inline ExperimentConfig desk_experiment() {
  ExperimentConfig e;
  e.synth.image_width = 256;
  e.synth.image_height = 128;
  e.synth.fx = 200.0;
  e.synth.fy = 200.0;
  e.synth.depth_noise = 0.1;
  e.synth.radar_dropout = 0.5;
  e.model.image_width = 256;
  e.model.image_height = 128;
  e.model.cell = 2.0;
  e.model.camera_channels = 8;
  e.model.cdsm.channels = 8;
  e.model.radar_features = 8;
  e.model.radar_channels = 8;
  e.train.lr = 3e-3;
  e.train.epochs = 30;
  e.finetune_lr_scale = 0.3;
  return e;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw std::runtime_error("cannot open config: " + path.string());
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

/// FNV-1a of the canonical (sorted-key, compact) JSON dump, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& j) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << nn::fnv1a(j.dump());
  return os.str();
}

}  // namespace cdsm
