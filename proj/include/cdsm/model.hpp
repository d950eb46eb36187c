// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdsm/dataio.hpp"
#include "cdsm/detector.hpp"
#include "cdsm/fusion.hpp"
#include "cdsm/nn/layers.hpp"
#include "cdsm/nn/params.hpp"
#include "cdsm/voxelizer.hpp"

namespace cdsm::geom {

inline void to_json(nlohmann::json& j, const FovBox& f) {
  j = {{"x_min", f.x_min}, {"x_max", f.x_max}, {"y_min", f.y_min},
       {"y_max", f.y_max}, {"z_min", f.z_min}, {"z_max", f.z_max}};
}
inline void from_json(const nlohmann::json& j, FovBox& f) {
  const FovBox d;
  f.x_min = j.value("x_min", d.x_min);
  f.x_max = j.value("x_max", d.x_max);
  f.y_min = j.value("y_min", d.y_min);
  f.y_max = j.value("y_max", d.y_max);
  f.z_min = j.value("z_min", d.z_min);
  f.z_max = j.value("z_max", d.z_max);
}

}  // namespace cdsm::geom

namespace cdsm::model {

using nn::Var;

enum class Regime { Cam2d, Cam3d, Radar3d, FusionFrozen, FusionFinetune };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::Cam2d: return "cam2d";
    case Regime::Cam3d: return "cam3d";
    case Regime::Radar3d: return "radar3d";
    case Regime::FusionFrozen: return "fusion_frozen";
    case Regime::FusionFinetune: return "fusion_finetune";
  }
  return "?";
}

inline Regime regime_from_string(const std::string& s) {
  for (Regime r : {Regime::Cam2d, Regime::Cam3d, Regime::Radar3d, Regime::FusionFrozen, Regime::FusionFinetune}) {
    if (to_string(r) == s) {
      return r;
    }
  }
  throw std::invalid_argument("unknown regime '" + s +
                              "' (expected cam2d, cam3d, radar3d, fusion_frozen or fusion_finetune)");
}

inline bool is_fusion(Regime r) { return r == Regime::FusionFrozen || r == Regime::FusionFinetune; }
inline det::Kind kind_of(Regime r) { return r == Regime::Cam2d ? det::Kind::Box2d : det::Kind::Box3d; }

/// Label filter used for the training targets of a regime.
inline data::FilterMode filter_of(Regime r) {
  switch (r) {
    case Regime::Cam2d:
    case Regime::Cam3d: return data::FilterMode::Camera2d;
    case Regime::Radar3d: return data::FilterMode::Radar3d;
    default: return data::FilterMode::Fusion3d;
  }
}

struct ModelConfig {
  int image_width = 512;
  int image_height = 384;
  geom::FovBox fov;
  double cell = 1.0;  // BEV cell side and radar voxel footprint, meters
  double voxel_dz = 1.0;
  int max_points = 5;

  int camera_channels = 16;
  int camera_repeats = 1;
  int radar_features = 8;
  int radar_channels = 16;
  int bev_repeats = 1;
  int head_depth = 1;
  fusion::CdsmConfig cdsm = [] {
    fusion::CdsmConfig c;
    c.channels = 16;
    return c;
  }();

  det::AnchorConfig anchors;
  det::AssignConfig assign;
  std::vector<double> reg_weights;  // per code entry; empty means all ones
  int class_id = data::kCar;

  vox::VoxelGridSpec voxel_spec() const { return {fov, cell, cell, voxel_dz, max_points}; }
  fusion::BevGrid bev_grid() const { return {fov, cell}; }
  geom::ImageSize image_size() const { return {image_width, image_height}; }

  void validate() const {
    nn::ImageBackbone::check_input(image_height, image_width);
    voxel_spec().validate();
    const fusion::BevGrid g = bev_grid();
    if (g.nx() % 4 != 0 || g.ny() % 4 != 0) {
      throw std::invalid_argument("model: BEV grid " + std::to_string(g.nx()) + "x" + std::to_string(g.ny()) +
                                  " is not divisible by 4");
    }
    for (int c : {camera_channels, radar_features, radar_channels, cdsm.channels}) {
      if (c < 1) {
        throw std::invalid_argument("model: channel counts must be >= 1");
      }
    }
    if (camera_repeats < 1 || bev_repeats < 1 || head_depth < 0) {
      throw std::invalid_argument("model: repeats must be >= 1 and head depth >= 0");
    }
    cdsm.bins.validate(fov);
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_width", c.image_width},
       {"image_height", c.image_height},
       {"fov", c.fov},
       {"cell", c.cell},
       {"voxel_dz", c.voxel_dz},
       {"max_points", c.max_points},
       {"camera_channels", c.camera_channels},
       {"camera_repeats", c.camera_repeats},
       {"radar_features", c.radar_features},
       {"radar_channels", c.radar_channels},
       {"bev_repeats", c.bev_repeats},
       {"head_depth", c.head_depth},
       {"cdsm_channels", c.cdsm.channels},
       {"refine_convs", c.cdsm.refine_convs},
       {"bins", c.cdsm.bins},
       {"anchors", c.anchors},
       {"pos_cells", c.assign.pos_cells},
       {"ignore_cells", c.assign.ignore_cells},
       {"pos_iou", c.assign.pos_iou},
       {"neg_iou", c.assign.neg_iou},
       {"reg_weights", c.reg_weights},
       {"class_id", c.class_id}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.image_width = j.value("image_width", d.image_width);
  c.image_height = j.value("image_height", d.image_height);
  c.fov = j.value("fov", d.fov);
  c.cell = j.value("cell", d.cell);
  c.voxel_dz = j.value("voxel_dz", d.voxel_dz);
  c.max_points = j.value("max_points", d.max_points);
  c.camera_channels = j.value("camera_channels", d.camera_channels);
  c.camera_repeats = j.value("camera_repeats", d.camera_repeats);
  c.radar_features = j.value("radar_features", d.radar_features);
  c.radar_channels = j.value("radar_channels", d.radar_channels);
  c.bev_repeats = j.value("bev_repeats", d.bev_repeats);
  c.head_depth = j.value("head_depth", d.head_depth);
  c.cdsm = d.cdsm;
  c.cdsm.channels = j.value("cdsm_channels", d.cdsm.channels);
  c.cdsm.refine_convs = j.value("refine_convs", d.cdsm.refine_convs);
  c.cdsm.bins = j.value("bins", d.cdsm.bins);
  c.anchors = j.value("anchors", d.anchors);
  c.assign.pos_cells = j.value("pos_cells", d.assign.pos_cells);
  c.assign.ignore_cells = j.value("ignore_cells", d.assign.ignore_cells);
  c.assign.pos_iou = j.value("pos_iou", d.assign.pos_iou);
  c.assign.neg_iou = j.value("neg_iou", d.assign.neg_iou);
  c.reg_weights = j.value("reg_weights", d.reg_weights);
  c.class_id = j.value("class_id", d.class_id);
}

/// One scene converted to network inputs and training targets.
struct Sample {
  std::string id;
  Tensor image;  // (3, H, W), pixel values minus 0.5
  geom::CameraCalib calib;
  fusion::FovMask mask;
  vox::VoxelizedSample radar;
  std::vector<Box2D> boxes2d;  // regime targets (2D regime)
  std::vector<Box3D> boxes3d;  // regime targets (3D regimes)
  std::vector<Box3D> eval3d;   // union-filtered labels shared by all 3D regimes
  det::Targets targets;
};

/// Outputs of the frozen camera and radar submodels of a fusion model.
struct FrozenFeatures {
  std::vector<Tensor> camera;  // camera BiFPN levels, strides 8..128
  std::vector<Tensor> radar;   // radar BiFPN levels, strides 1, 2, 4
};

struct LossValue {
  Var total;
  double cls = 0.0;
  double reg = 0.0;
};

/// Parameter prefixes:
///   camera.backbone  camera.bifpn  camera.head2d
///   cdsm.*           cam3d.bifpn   cam3d.head
///   radar.vfe        radar.backbone  radar.bifpn  radar.head
///   fusion.bifpn     fusion.head
class Model {
 public:
  static Model create(const ModelConfig& cfg, Regime regime, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    m.regime_ = regime;
    nn::ParamStore& s = m.store_;
    const bool camera = regime != Regime::Radar3d;
    const bool radar = regime == Regime::Radar3d || is_fusion(regime);
    if (camera) {
      m.cam_backbone_ = nn::ImageBackbone::create(s, "camera.backbone", 3, cfg.camera_channels, seed);
      m.cam_bifpn_ = nn::BiFpn::create(s, "camera.bifpn", cfg.camera_repeats, 5, cfg.camera_channels,
                                       nn::Activation::LeakyRelu, seed);
    }
    if (regime == Regime::Cam2d) {
      m.head_ = det::DetectionHead::create(s, "camera.head2d", cfg.camera_channels, cfg.anchors.per_cell(),
                                           det::Kind::Box2d, cfg.head_depth, seed);
    } else if (camera) {
      m.cdsm_ = fusion::CdsmBlock::create(s, "cdsm", cfg.cdsm, cfg.camera_channels, seed);
    }
    if (regime == Regime::Cam3d) {
      m.bev_bifpn_ = nn::BiFpn::create(s, "cam3d.bifpn", cfg.bev_repeats, 3, cfg.cdsm.channels,
                                       nn::Activation::LeakyRelu, seed);
      m.head_ = det::DetectionHead::create(s, "cam3d.head", cfg.cdsm.channels, cfg.anchors.per_cell(),
                                           det::Kind::Box3d, cfg.head_depth, seed);
    }
    if (radar) {
      const vox::VoxelGridSpec vs = cfg.voxel_spec();
      m.vfe_ = vox::Vfe::create(s, "radar.vfe", cfg.radar_features, cfg.fov, seed);
      m.radar_backbone_ = nn::BevBackbone::create(s, "radar.backbone", vs.nz() * cfg.radar_features,
                                                  cfg.radar_channels, seed);
      m.radar_bifpn_ = nn::BiFpn::create(s, "radar.bifpn", cfg.bev_repeats, 3, cfg.radar_channels,
                                         nn::Activation::LeakyRelu, seed);
    }
    if (regime == Regime::Radar3d) {
      m.head_ = det::DetectionHead::create(s, "radar.head", cfg.radar_channels, cfg.anchors.per_cell(),
                                           det::Kind::Box3d, cfg.head_depth, seed);
    }
    if (is_fusion(regime)) {
      m.fusion_ = fusion::FusionNeck::create(s, "fusion.bifpn", cfg.cdsm.channels, cfg.radar_channels,
                                             cfg.bev_repeats, seed);
      m.head_ = det::DetectionHead::create(s, "fusion.head", cfg.cdsm.channels + cfg.radar_channels,
                                           cfg.anchors.per_cell(), det::Kind::Box3d, cfg.head_depth, seed);
    }
    m.build_anchors();
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  Regime regime() const { return regime_; }
  det::Kind kind() const { return kind_of(regime_); }
  int code_size() const { return det::code_size(kind()); }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  const std::vector<det::AnchorSet>& anchor_sets() const { return anchor_sets_; }
  const std::vector<det::Anchor>& anchors() const { return anchors_; }

  std::vector<double> reg_weights() const {
    return cfg_.reg_weights.empty() ? std::vector<double>(static_cast<std::size_t>(code_size()), 1.0)
                                    : cfg_.reg_weights;
  }

  /// Empty (everything trainable) except in the frozen fusion regime.
  nn::TrainablePredicate trainable() const {
    if (regime_ != Regime::FusionFrozen) {
      return {};
    }
    return [](const std::string& name) { return name.rfind("cdsm.", 0) == 0 || name.rfind("fusion.", 0) == 0; };
  }

  bool is_trainable(const std::string& name) const {
    const auto t = trainable();
    return !t || t(name);
  }

  Sample prepare(const data::Scene& in) const {
    const data::Scene sc = data::preprocess_scene(in, cfg_.fov, cfg_.image_width, cfg_.image_height);
    Sample s;
    s.id = sc.id;
    s.calib = sc.calib;
    s.image = Tensor(Shape{3, cfg_.image_height, cfg_.image_width});
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < cfg_.image_height; ++y) {
        for (int x = 0; x < cfg_.image_width; ++x) {
          s.image[(static_cast<Index>(c) * cfg_.image_height + y) * cfg_.image_width + x] = sc.image.at(y, x, c) - 0.5;
        }
      }
    }
    s.mask = fusion::make_fov_mask(sc.calib, cfg_.image_size(), cfg_.bev_grid());
    s.radar = vox::voxelize(sc.radar, cfg_.voxel_spec());
    for (const data::Label& l : data::filter_labels(sc.labels, data::FilterMode::Fusion3d, cfg_.class_id, cfg_.fov)) {
      s.eval3d.push_back(l.box);
    }
    for (const data::Label& l : data::filter_labels(sc.labels, filter_of(regime_), cfg_.class_id, cfg_.fov)) {
      if (kind() == det::Kind::Box3d) {
        s.boxes3d.push_back(l.box);
      } else if (auto b = geom::cuboid_to_bbox2d(l.box, sc.calib, cfg_.image_size())) {
        b->class_id = cfg_.class_id;
        s.boxes2d.push_back(*b);
      }
    }
    std::vector<det::Targets> parts;
    for (const det::AnchorSet& set : anchor_sets_) {
      parts.push_back(kind() == det::Kind::Box3d ? det::assign_targets_3d(s.boxes3d, set, cfg_.assign)
                                                 : det::assign_targets_2d(s.boxes2d, set, cfg_.assign));
    }
    s.targets = det::concat_targets(parts, code_size());
    return s;
  }

  /// Ground truth used for evaluation of this regime's output.
  const std::vector<Box3D>& eval_labels3d(const Sample& s) const { return s.eval3d; }

  FrozenFeatures frozen_features(const Sample& s) const {
    if (!is_fusion(regime_)) {
      throw std::logic_error("frozen_features: not a fusion model");
    }
    nn::Binding bind(store_, false);
    FrozenFeatures f;
    for (const Var& v : camera_levels(bind, s).maps) {
      f.camera.push_back(v.value());
    }
    for (const Var& v : radar_levels(bind, s).maps) {
      f.radar.push_back(v.value());
    }
    return f;
  }

  /// Head output pooled over levels. With `frozen`, the camera and radar
  /// submodels are replaced by their cached outputs.
  det::DetectionHead::Output forward(nn::Binding& bind, const Sample& s, const FrozenFeatures* frozen = nullptr) const {
    switch (regime_) {
      case Regime::Cam2d: return head_(bind, camera_levels(bind, s));
      case Regime::Cam3d:
        return head_(bind, bev_bifpn_(bind, cdsm_(bind, camera_levels(bind, s), s.calib, s.mask)));
      case Regime::Radar3d: return head_(bind, radar_levels(bind, s));
      default: break;
    }
    nn::LevelSet cam, rad;
    if (frozen != nullptr) {
      cam = constants(frozen->camera, {8, 16, 32, 64, 128});
      rad = constants(frozen->radar, {1, 2, 4});
    } else {
      cam = camera_levels(bind, s);
      rad = radar_levels(bind, s);
    }
    return head_(bind, fusion_(bind, cdsm_(bind, cam, s.calib, s.mask), rad));
  }

  LossValue loss(nn::Binding& bind, const Sample& s, const det::FocalParams& fp,
                 const FrozenFeatures* frozen = nullptr) const {
    const auto out = forward(bind, s, frozen);
    const double norm = std::max(1, s.targets.num_pos);
    const Var c = det::focal_loss(out.probs, s.targets.label, norm, fp);
    const Var r = det::weighted_mse(out.codes, s.targets.reg, s.targets.label, reg_weights(), norm);
    return {nn::add(c, r), c.value()[0], r.value()[0]};
  }

  det::SceneDetections detect(const Sample& s, const det::InferenceConfig& ic = {}) const {
    nn::Binding bind(store_, false);
    const auto out = forward(bind, s);
    det::SceneDetections d;
    d.scene = s.id;
    d.kind = kind();
    if (kind() == det::Kind::Box2d) {
      d.boxes2d = det::decode_detections_2d(out.probs.value(), out.codes.value(), anchors_, ic, cfg_.class_id);
    } else {
      d.boxes3d = det::decode_detections_3d(out.probs.value(), out.codes.value(), anchors_, ic, cfg_.class_id);
    }
    return d;
  }

 private:
  nn::LevelSet camera_levels(nn::Binding& bind, const Sample& s) const {
    return cam_bifpn_(bind, cam_backbone_(bind, Var::constant(s.image)));
  }

  nn::LevelSet radar_levels(nn::Binding& bind, const Sample& s) const {
    const vox::VoxelGridSpec vs = cfg_.voxel_spec();
    const Var grid = vox::stack_z_chw(s.radar, vs, vfe_(bind, s.radar), cfg_.radar_features);
    return radar_bifpn_(bind, radar_backbone_(bind, grid));
  }

  static nn::LevelSet constants(const std::vector<Tensor>& ts, std::vector<int> strides) {
    if (ts.size() != strides.size()) {
      throw std::invalid_argument("forward: cached features have " + std::to_string(ts.size()) + " levels, expected " +
                                  std::to_string(strides.size()));
    }
    nn::LevelSet out{{}, std::move(strides)};
    for (const Tensor& t : ts) {
      out.maps.push_back(Var::constant(t));
    }
    return out;
  }

  void build_anchors() {
    anchor_sets_.clear();
    if (kind() == det::Kind::Box2d) {
      for (int stride = 8; stride <= 128; stride *= 2) {
        det::LevelSpec l{cfg_.image_height / stride, cfg_.image_width / stride, static_cast<double>(stride)};
        anchor_sets_.push_back(det::generate_anchors(l, det::Kind::Box2d, cfg_.anchors));
      }
    } else {
      const fusion::BevGrid g = cfg_.bev_grid();
      for (int stride : {1, 2, 4}) {
        det::LevelSpec l{g.nx() / stride, g.ny() / stride, cfg_.cell * stride, cfg_.fov.x_min, cfg_.fov.y_min};
        anchor_sets_.push_back(det::generate_anchors(l, det::Kind::Box3d, cfg_.anchors));
      }
    }
    anchors_ = det::pooled_anchors(anchor_sets_);
  }

  ModelConfig cfg_;
  Regime regime_ = Regime::Cam3d;
  nn::ParamStore store_;
  nn::ImageBackbone cam_backbone_;
  nn::BiFpn cam_bifpn_;
  fusion::CdsmBlock cdsm_;
  nn::BiFpn bev_bifpn_;
  vox::Vfe vfe_;
  nn::BevBackbone radar_backbone_;
  nn::BiFpn radar_bifpn_;
  fusion::FusionNeck fusion_;
  det::DetectionHead head_;
  std::vector<det::AnchorSet> anchor_sets_;
  std::vector<det::Anchor> anchors_;
};

}  // namespace cdsm::model
