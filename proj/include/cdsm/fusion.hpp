// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Camera-to-BEV transfer: image feature levels are rotated into vehicle
// axes, collapsed over the vertical axis, scattered onto the BEV grid by
// distance range inside the camera frustum, refined into three grids and
// concatenated with radar features.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdsm/geometry.hpp"
#include "cdsm/nn/layers.hpp"

namespace cdsm::fusion {

using geom::Axis;
using geom::AxisLabel;
using geom::CameraCalib;
using geom::FovBox;
using geom::ImageSize;
using geom::OrientedTensor;
using geom::RotationChain;
using nn::Var;

/// Camera features in HWC layout: rows run down (-Z), columns run right
/// (-Y) and the channel axis stands in for depth (+X).
inline std::vector<AxisLabel> camera_hwc_labels() {
  return {{Axis::Z, -1}, {Axis::Y, -1}, {Axis::X, +1}};
}

// ---------------------------------------------------------------------------
// Distance bins

struct DistanceBin {
  int level = 3;  // image pyramid level, stride 2^level
  double near = 0.0;
  double far = 80.0;
};

inline void to_json(nlohmann::json& j, const DistanceBin& b) { j = {{"level", b.level}, {"near", b.near}, {"far", b.far}}; }
inline void from_json(const nlohmann::json& j, DistanceBin& b) {
  b.level = j.at("level").get<int>();
  b.near = j.at("near").get<double>();
  b.far = j.at("far").get<double>();
}

struct DistanceBinConfig {
  std::vector<DistanceBin> bins = {{3, 40.0, 80.0}, {4, 20.0, 40.0}, {5, 0.0, 20.0}};

  /// Bins must tile [x_min, x_max) without gaps or overlap, and a finer
  /// level must sit farther out than a coarser one.
  void validate(const FovBox& fov = {}) const {
    if (bins.empty()) {
      throw std::invalid_argument("DistanceBinConfig: no bins");
    }
    std::vector<DistanceBin> b = bins;
    std::sort(b.begin(), b.end(), [](const DistanceBin& a, const DistanceBin& c) { return a.near < c.near; });
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (!(b[i].near < b[i].far)) {
        throw std::invalid_argument("DistanceBinConfig: empty range for level " + std::to_string(b[i].level));
      }
      if (b[i].level < 0 || b[i].level > 10) {
        throw std::invalid_argument("DistanceBinConfig: level " + std::to_string(b[i].level) + " out of range");
      }
      if (i > 0) {
        if (b[i].near < b[i - 1].far) {
          throw std::invalid_argument("DistanceBinConfig: ranges of levels " + std::to_string(b[i - 1].level) +
                                      " and " + std::to_string(b[i].level) + " overlap");
        }
        if (b[i].near > b[i - 1].far) {
          throw std::invalid_argument("DistanceBinConfig: gap before level " + std::to_string(b[i].level));
        }
        if (b[i].level >= b[i - 1].level) {
          throw std::invalid_argument("DistanceBinConfig: level " + std::to_string(b[i].level) +
                                      " is not finer than the nearer level " + std::to_string(b[i - 1].level));
        }
      }
    }
    if (b.front().near > fov.x_min || b.back().far < fov.x_max) {
      throw std::invalid_argument("DistanceBinConfig: bins do not cover the FOV depth range");
    }
  }

  /// Level whose bin contains x, if any.
  std::optional<int> level_at(double x) const {
    for (const DistanceBin& b : bins) {
      if (x >= b.near && x < b.far) {
        return b.level;
      }
    }
    return std::nullopt;
  }
};

inline void to_json(nlohmann::json& j, const DistanceBinConfig& c) { j = c.bins; }
inline void from_json(const nlohmann::json& j, DistanceBinConfig& c) { c.bins = j.get<std::vector<DistanceBin>>(); }

// ---------------------------------------------------------------------------
// BEV grid and frustum mask

struct BevGrid {
  FovBox fov;
  double cell = 1.0;

  Index nx() const { return static_cast<Index>(std::lround((fov.x_max - fov.x_min) / cell)); }
  Index ny() const { return static_cast<Index>(std::lround((fov.y_max - fov.y_min) / cell)); }
  double x_center(Index ix) const { return fov.x_min + (static_cast<double>(ix) + 0.5) * cell; }
  double y_center(Index iy) const { return fov.y_min + (static_cast<double>(iy) + 0.5) * cell; }
};

/// Projection of a cell center onto the image at camera height: the depth
/// and the horizontal pixel coordinate.
inline geom::Projection project_cell(const BevGrid& grid, Index ix, Index iy, const CameraCalib& calib) {
  return geom::project_unchecked({grid.x_center(ix), grid.y_center(iy), calib.pose.translation.z}, calib);
}

struct FovMask {
  BevGrid grid;
  ImageSize image;
  std::vector<std::uint8_t> cells;  // nx * ny, row-major over (ix, iy)

  bool operator()(Index ix, Index iy) const { return cells[static_cast<std::size_t>(ix * grid.ny() + iy)] != 0; }
  Index count() const { return std::count(cells.begin(), cells.end(), std::uint8_t{1}); }
};

inline FovMask make_fov_mask(const CameraCalib& calib, ImageSize image, const BevGrid& grid = {}) {
  calib.validate();
  FovMask m{grid, image, std::vector<std::uint8_t>(static_cast<std::size_t>(grid.nx() * grid.ny()), 0)};
  for (Index ix = 0; ix < grid.nx(); ++ix) {
    for (Index iy = 0; iy < grid.ny(); ++iy) {
      const geom::Projection p = project_cell(grid, ix, iy, calib);
      m.cells[static_cast<std::size_t>(ix * grid.ny() + iy)] = p.depth > 0.0 && p.u >= 0.0 && p.u < image.width;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Alignment

struct AlignedLevel {
  Var data;
  std::vector<AxisLabel> labels;
};

/// Rotates a channels-first (C, H, W) level into vehicle orientation. The
/// CHW -> HWC permutation and the rotation are one gather.
inline AlignedLevel align_level(const Var& chw, const RotationChain& chain) {
  nn::detail::require_rank(chw, 3, "align_level");
  const Index C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  const geom::RotationMap map = geom::rotation_map(Shape{H, W, C}, chain);
  auto src = std::make_shared<std::vector<Index>>(map.source.size());
  for (std::size_t i = 0; i < src->size(); ++i) {
    const Index hwc = map.source[i];
    const Index h = hwc / (W * C), w = (hwc / C) % W, c = hwc % C;
    (*src)[i] = (c * H + h) * W + w;
  }
  AlignedLevel out{nn::gather(chw, std::move(src), map.out_shape), camera_hwc_labels()};
  for (int a = 0; a < 3; ++a) {
    const int j = [&] {
      for (int k = 0; k < 3; ++k) {
        if (map.matrix[a][k] != 0) {
          return k;
        }
      }
      return 0;
    }();
    out.labels[a] = map.matrix[a][j] > 0 ? camera_hwc_labels()[j] : -camera_hwc_labels()[j];
  }
  return out;
}

/// Tensor-level alignment of HWC camera levels.
inline std::vector<OrientedTensor> align_camera_features(const std::vector<OrientedTensor>& levels,
                                                         const RotationChain& chain = geom::default_camera_chain()) {
  std::vector<OrientedTensor> out;
  out.reserve(levels.size());
  for (const OrientedTensor& t : levels) {
    out.push_back(geom::cdsm_rotate(t, chain));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

namespace detail {

inline int find_axis(const std::vector<AxisLabel>& labels, Axis a) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].axis == a) {
      return static_cast<int>(i);
    }
  }
  return -1;
}

inline int level_of_stride(Index stride) {
  int level = 0;
  while ((Index{1} << level) < stride) {
    ++level;
  }
  if ((Index{1} << level) != stride) {
    throw std::invalid_argument("aggregate_to_bev: level stride " + std::to_string(stride) + " is not a power of two");
  }
  return level;
}

}  // namespace detail

/// Scatters aligned levels onto a channels-first (C, nx, ny) BEV grid. Each
/// level is first reduced by a max over its vertical axis. A cell inside
/// the mask and inside a level's distance bin takes the feature column of
/// that level whose image column contains the cell's azimuth; all other
/// cells stay zero.
inline Var aggregate_to_bev(const std::vector<AlignedLevel>& levels, const CameraCalib& calib,
                            const DistanceBinConfig& bins, const FovMask& mask) {
  bins.validate(mask.grid.fov);
  if (levels.empty()) {
    throw std::invalid_argument("aggregate_to_bev: no camera levels");
  }
  const BevGrid& grid = mask.grid;
  const Index nx = grid.nx(), ny = grid.ny();
  Index C = -1;
  std::optional<Var> bev;
  std::vector<int> used;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const AlignedLevel& L = levels[li];
    if (!geom::bev_oriented(L.labels)) {
      throw std::invalid_argument("aggregate_to_bev: level " + std::to_string(li) + " is not aligned (labels " +
                                  geom::to_string(L.labels[0]) + "," + geom::to_string(L.labels[1]) + "," +
                                  geom::to_string(L.labels[2]) + ")");
    }
    const int zaxis = detail::find_axis(L.labels, Axis::Z);
    const int yaxis = detail::find_axis(L.labels, Axis::Y);
    if (zaxis < 0 || yaxis < 0) {
      throw std::invalid_argument("aggregate_to_bev: level " + std::to_string(li) + " lacks a Y or Z axis");
    }
    const Var flat = nn::max_axis(L.data, static_cast<std::size_t>(zaxis));
    const int col_axis = yaxis > zaxis ? yaxis - 1 : yaxis;
    const Index W = flat.dim(static_cast<std::size_t>(col_axis));
    const Index Cl = flat.dim(static_cast<std::size_t>(1 - col_axis));
    if (C < 0) {
      C = Cl;
    } else if (Cl != C) {
      throw std::invalid_argument("aggregate_to_bev: level " + std::to_string(li) + " has " + std::to_string(Cl) +
                                  " channels, expected " + std::to_string(C));
    }
    if (mask.image.width % W != 0) {
      throw std::invalid_argument("aggregate_to_bev: image width is not a multiple of level width " +
                                  std::to_string(W));
    }
    const Index stride = mask.image.width / W;
    const int level = detail::level_of_stride(stride);
    if (std::find(used.begin(), used.end(), level) != used.end()) {
      throw std::invalid_argument("aggregate_to_bev: duplicate level " + std::to_string(level));
    }
    used.push_back(level);
    const bool flip = L.labels[static_cast<std::size_t>(yaxis)].sign > 0;
    auto src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(C * nx * ny), -1);
    bool any = false;
    for (Index ix = 0; ix < nx; ++ix) {
      if (bins.level_at(grid.x_center(ix)) != level) {
        continue;
      }
      for (Index iy = 0; iy < ny; ++iy) {
        if (!mask(ix, iy)) {
          continue;
        }
        const double u = project_cell(grid, ix, iy, calib).u;
        Index col = std::clamp<Index>(static_cast<Index>(std::floor(u / static_cast<double>(stride))), 0, W - 1);
        if (flip) {
          col = W - 1 - col;
        }
        for (Index c = 0; c < C; ++c) {
          (*src)[static_cast<std::size_t>((c * nx + ix) * ny + iy)] = col_axis == 1 ? c * W + col : col * C + c;
        }
        any = true;
      }
    }
    if (!any) {
      continue;
    }
    Var part = nn::gather(flat, std::move(src), Shape{C, nx, ny});
    bev = bev ? nn::add(*bev, part) : part;
  }
  for (const DistanceBin& b : bins.bins) {
    if (std::find(used.begin(), used.end(), b.level) == used.end()) {
      throw std::invalid_argument("aggregate_to_bev: no camera level for bin of level " + std::to_string(b.level));
    }
  }
  return bev ? *bev : Var::constant(Tensor(Shape{C, nx, ny}));
}

/// Tensor form: aligned rank-3 levels in, (nx, ny, C) labeled (+X, +Y,
/// CHANNEL) out.
inline OrientedTensor aggregate_to_bev(const std::vector<OrientedTensor>& aligned, const CameraCalib& calib,
                                       const DistanceBinConfig& bins, const FovMask& mask) {
  std::vector<AlignedLevel> levels;
  for (const OrientedTensor& t : aligned) {
    t.validate();
    if (t.data.rank() != 3) {
      throw std::invalid_argument("aggregate_to_bev: aligned levels must be rank 3");
    }
    levels.push_back({Var::constant(t.data), t.labels});
  }
  const Tensor chw = aggregate_to_bev(levels, calib, bins, mask).value();
  const Index C = chw.dim(0), nx = chw.dim(1), ny = chw.dim(2);
  OrientedTensor out{Tensor(Shape{nx, ny, C}), {{Axis::X, +1}, {Axis::Y, +1}, {Axis::Channel, +1}}};
  for (Index c = 0; c < C; ++c) {
    for (Index i = 0; i < nx * ny; ++i) {
      out.data[i * C + c] = chw[c * nx * ny + i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Refinement and fusion

struct CdsmConfig {
  int channels = 32;  // common camera width on the BEV grid
  int refine_convs = 2;
  bool refine_bias = true;
  RotationChain chain = geom::default_camera_chain();
  DistanceBinConfig bins;
};

/// Stride-1 blocks on the full grid, then two stride-2 blocks: grids of
/// side n, n/2 and n/4 with strides 1, 2, 4.
struct BevRefiner {
  std::vector<nn::ConvBlock> full;
  nn::ConvBlock down1;
  nn::ConvBlock down2;

  static BevRefiner create(nn::ParamStore& store, const std::string& name, int channels, int convs, bool bias,
                           std::uint64_t seed) {
    BevRefiner r;
    for (int i = 0; i < convs; ++i) {
      r.full.push_back(nn::ConvBlock::create(store, name + ".c" + std::to_string(i), channels, channels, 3, 1,
                                             nn::Activation::LeakyRelu, seed, bias));
    }
    r.down1 = nn::ConvBlock::create(store, name + ".d1", channels, channels, 3, 2, nn::Activation::LeakyRelu, seed, bias);
    r.down2 = nn::ConvBlock::create(store, name + ".d2", channels, channels, 3, 2, nn::Activation::LeakyRelu, seed, bias);
    return r;
  }

  nn::LevelSet operator()(nn::Binding& bind, const Var& bev) const {
    nn::detail::require_rank(bev, 3, "refine_bev");
    if (bev.dim(1) % 4 != 0 || bev.dim(2) % 4 != 0) {
      throw std::invalid_argument("refine_bev: grid " + shape_str(bev.shape()) + " is not divisible by 4");
    }
    Var a = bev;
    for (const auto& b : full) {
      a = b(bind, a);
    }
    const Var b = down1(bind, a);
    const Var c = down2(bind, b);
    return {{a, b, c}, {1, 2, 4}};
  }
};

/// Camera branch on the BEV grid: per-level 1x1 projection to a common
/// width, alignment, aggregation and refinement.
struct CdsmBlock {
  CdsmConfig config;
  std::vector<nn::Conv2d> proj;  // one per bin, in bin order
  BevRefiner refine;

  static CdsmBlock create(nn::ParamStore& store, const std::string& name, const CdsmConfig& cfg, int in_channels,
                          std::uint64_t seed) {
    if (cfg.bins.bins.empty()) {
      throw std::invalid_argument("CdsmBlock: no distance bins");
    }
    CdsmBlock b;
    b.config = cfg;
    for (const DistanceBin& bin : cfg.bins.bins) {
      b.proj.push_back(nn::Conv2d::create(store, name + ".proj_p" + std::to_string(bin.level), in_channels,
                                          cfg.channels, 1, 1, seed));
    }
    b.refine = BevRefiner::create(store, name + ".refine", cfg.channels, cfg.refine_convs, cfg.refine_bias, seed);
    return b;
  }

  /// (C, nx, ny) camera BEV grid from image levels with known strides.
  Var bev(nn::Binding& bind, const nn::LevelSet& image, const CameraCalib& calib, const FovMask& mask) const {
    std::vector<AlignedLevel> aligned;
    for (std::size_t i = 0; i < config.bins.bins.size(); ++i) {
      const int stride = 1 << config.bins.bins[i].level;
      const auto it = std::find(image.strides.begin(), image.strides.end(), stride);
      if (it == image.strides.end()) {
        throw std::invalid_argument("CdsmBlock: image levels lack stride " + std::to_string(stride));
      }
      const Var& x = image.maps[static_cast<std::size_t>(it - image.strides.begin())];
      aligned.push_back(align_level(proj[i](bind, x), config.chain));
    }
    return aggregate_to_bev(aligned, calib, config.bins, mask);
  }

  nn::LevelSet operator()(nn::Binding& bind, const nn::LevelSet& image, const CameraCalib& calib,
                          const FovMask& mask) const {
    return refine(bind, bev(bind, image, calib, mask));
  }
};

/// Per-level channel concatenation, camera channels first.
inline nn::LevelSet concat_levels(const nn::LevelSet& cam, const nn::LevelSet& radar) {
  if (cam.size() != radar.size()) {
    throw std::invalid_argument("fuse: " + std::to_string(cam.size()) + " camera levels vs " +
                                std::to_string(radar.size()) + " radar levels");
  }
  nn::LevelSet out{{}, cam.strides};
  for (std::size_t i = 0; i < cam.size(); ++i) {
    if (cam[i].dim(1) != radar[i].dim(1) || cam[i].dim(2) != radar[i].dim(2)) {
      throw std::invalid_argument("fuse: level " + std::to_string(i) + " camera grid " + shape_str(cam[i].shape()) +
                                  " does not match radar grid " + shape_str(radar[i].shape()));
    }
    out.maps.push_back(nn::concat({cam[i], radar[i]}));
  }
  return out;
}

struct FusionNeck {
  nn::BiFpn bifpn;
  int channels = 0;

  static FusionNeck create(nn::ParamStore& store, const std::string& name, int cam_channels, int radar_channels,
                           int repeats, std::uint64_t seed) {
    return {nn::BiFpn::create(store, name, repeats, 3, cam_channels + radar_channels, nn::Activation::LeakyRelu, seed),
            cam_channels + radar_channels};
  }

  nn::LevelSet operator()(nn::Binding& bind, const nn::LevelSet& cam, const nn::LevelSet& radar) const {
    const nn::LevelSet joined = concat_levels(cam, radar);
    for (std::size_t i = 0; i < joined.size(); ++i) {
      if (joined[i].dim(0) != channels) {
        throw std::invalid_argument("fuse: level " + std::to_string(i) + " has " + std::to_string(joined[i].dim(0)) +
                                    " channels after concatenation, expected " + std::to_string(channels));
      }
    }
    return bifpn(bind, joined);
  }
};

}  // namespace cdsm::fusion
