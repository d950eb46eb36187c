// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Radar voxel grid: binning, per-voxel point features, a single-stage voxel
// feature extractor and vertical stacking into a BEV tensor.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdsm/dataio.hpp"
#include "cdsm/geometry.hpp"
#include "cdsm/nn/layers.hpp"

namespace cdsm::vox {

using geom::Axis;
using geom::AxisLabel;
using geom::FovBox;
using geom::OrientedTensor;

/// Per-point feature layout:
///   0..2  x, y, z           (VCS meters)
///   3..4  vx, vy            (m/s)
///   5     rcs
///   6..8  x, y, z minus the voxel center
inline constexpr int kPointFeatures = 9;

struct VoxelGridSpec {
  FovBox fov;
  double dx = 1.0;
  double dy = 1.0;
  double dz = 1.0;
  int max_points = 5;

  static int cells(double lo, double hi, double size, const char* axis) {
    if (!(size > 0.0)) {
      throw std::invalid_argument(std::string("VoxelGridSpec: voxel size along ") + axis + " must be positive");
    }
    const double n = (hi - lo) / size;
    const double r = std::round(n);
    if (std::abs(n - r) > 1e-9 || r < 1) {
      throw std::invalid_argument(std::string("VoxelGridSpec: voxel size does not divide the FOV along ") + axis);
    }
    return static_cast<int>(r);
  }

  int nx() const { return cells(fov.x_min, fov.x_max, dx, "x"); }
  int ny() const { return cells(fov.y_min, fov.y_max, dy, "y"); }
  int nz() const { return cells(fov.z_min, fov.z_max, dz, "z"); }

  void validate() const {
    fov.validate();
    (void)nx();
    (void)ny();
    (void)nz();
    if (max_points < 1) {
      throw std::invalid_argument("VoxelGridSpec: max_points must be >= 1");
    }
  }

  std::array<int, 3> index_of(const VcsPoint& p) const {
    return {static_cast<int>(std::floor((p.x - fov.x_min) / dx)), static_cast<int>(std::floor((p.y - fov.y_min) / dy)),
            static_cast<int>(std::floor((p.z - fov.z_min) / dz))};
  }

  VcsPoint center_of(const std::array<int, 3>& i) const {
    return {fov.x_min + (i[0] + 0.5) * dx, fov.y_min + (i[1] + 0.5) * dy, fov.z_min + (i[2] + 0.5) * dz};
  }
};

class PointOutsideFov : public std::out_of_range {
 public:
  explicit PointOutsideFov(std::size_t index)
      : std::out_of_range("voxelize: point " + std::to_string(index) + " lies outside the FOV"), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

/// Occupied voxels in ascending (ix, iy, iz) order. `features` holds
/// max_points zero-padded rows of kPointFeatures values per voxel.
struct VoxelizedSample {
  std::vector<std::array<int, 3>> coords;
  std::vector<int> counts;
  Tensor features;  // [V * max_points, kPointFeatures]
  int max_points = 0;

  std::size_t voxels() const { return coords.size(); }
};

inline VoxelizedSample voxelize(const std::vector<data::RadarPoint>& points, const VoxelGridSpec& spec) {
  spec.validate();
  const int nx = spec.nx(), ny = spec.ny(), nz = spec.nz();
  std::map<std::int64_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!geom::in_fov(points[i].position, spec.fov)) {
      throw PointOutsideFov(i);
    }
    auto idx = spec.index_of(points[i].position);
    // Guard the half-open upper edge against rounding in the division.
    idx[0] = std::min(idx[0], nx - 1);
    idx[1] = std::min(idx[1], ny - 1);
    idx[2] = std::min(idx[2], nz - 1);
    auto& m = members[(static_cast<std::int64_t>(idx[0]) * ny + idx[1]) * nz + idx[2]];
    if (static_cast<int>(m.size()) < spec.max_points) {
      m.push_back(i);
    }
  }
  VoxelizedSample s;
  s.max_points = spec.max_points;
  s.features = Tensor(Shape{static_cast<Index>(members.size()) * spec.max_points, kPointFeatures});
  Index row = 0;
  for (const auto& [key, idx] : members) {
    const std::array<int, 3> c{static_cast<int>(key / (static_cast<std::int64_t>(ny) * nz)),
                               static_cast<int>((key / nz) % ny), static_cast<int>(key % nz)};
    const VcsPoint center = spec.center_of(c);
    s.coords.push_back(c);
    s.counts.push_back(static_cast<int>(idx.size()));
    for (int k = 0; k < spec.max_points; ++k, ++row) {
      if (k >= static_cast<int>(idx.size())) {
        continue;
      }
      const data::RadarPoint& p = points[idx[static_cast<std::size_t>(k)]];
      const double f[kPointFeatures] = {p.position.x, p.position.y, p.position.z, p.vx, p.vy, p.rcs,
                                        p.position.x - center.x, p.position.y - center.y, p.position.z - center.z};
      for (int j = 0; j < kPointFeatures; ++j) {
        s.features[row * kPointFeatures + j] = f[j];
      }
    }
  }
  return s;
}

/// Fixed per-feature scaling applied before the learned transform so that
/// all inputs are of order one.
inline std::array<double, kPointFeatures> feature_scale(const FovBox& fov) {
  return {1.0 / (fov.x_max - fov.x_min), 1.0 / (fov.y_max - fov.y_min), 1.0 / (fov.z_max - fov.z_min),
          0.1, 0.1, 0.1, 1.0, 1.0, 1.0};
}

/// Shared per-point affine map and LeakyReLU, then max over valid points.
struct Vfe {
  std::string weight;
  std::string bias;
  int out_features = 32;
  std::array<double, kPointFeatures> scale{};

  static Vfe create(nn::ParamStore& store, const std::string& name, int out_features, const FovBox& fov,
                    std::uint64_t seed) {
    Vfe v;
    v.weight = name + ".w";
    v.bias = name + ".b";
    v.out_features = out_features;
    v.scale = feature_scale(fov);
    store.add(v.weight, nn::xavier_init({kPointFeatures, out_features}, nn::param_seed(seed, v.weight)));
    store.add(v.bias, Tensor(Shape{out_features}));
    return v;
  }

  /// Returns [V, F]; an empty sample gives a [0, F] tensor.
  nn::Var operator()(nn::Binding& bind, const VoxelizedSample& s) const {
    if (s.voxels() == 0) {
      return nn::Var::constant(Tensor(Shape{0, out_features}));
    }
    for (std::size_t g = 0; g < s.counts.size(); ++g) {
      if (s.counts[g] < 1) {
        throw std::invalid_argument("vfe: voxel " + std::to_string(g) + " has no valid points");
      }
    }
    Tensor x = s.features;
    for (Index r = 0; r < x.dim(0); ++r) {
      for (int j = 0; j < kPointFeatures; ++j) {
        x[r * kPointFeatures + j] *= scale[static_cast<std::size_t>(j)];
      }
    }
    const nn::Var h = nn::leaky_relu(nn::add_row_bias(nn::matmul(nn::Var::constant(std::move(x)), bind(weight)),
                                                      bind(bias)),
                                     0.1);
    return nn::masked_group_max(h, s.counts, s.max_points);
  }

  /// Variant taking the point features as a differentiable input.
  nn::Var forward_points(nn::Binding& bind, const nn::Var& points, const std::vector<int>& counts, int max_points) const {
    Tensor sc(Shape{points.dim(0), kPointFeatures});
    for (Index r = 0; r < sc.dim(0); ++r) {
      for (int j = 0; j < kPointFeatures; ++j) {
        sc[r * kPointFeatures + j] = scale[static_cast<std::size_t>(j)];
      }
    }
    const nn::Var x = nn::mul(points, nn::Var::constant(std::move(sc)));
    const nn::Var h = nn::leaky_relu(nn::add_row_bias(nn::matmul(x, bind(weight)), bind(bias)), 0.1);
    return nn::masked_group_max(h, counts, max_points);
  }
};

/// Index map for stacking [V, F] voxel features into (X, Y, Z*F) with the
/// channel block of voxel height iz at [iz*F, (iz+1)*F). Empty cells are -1.
inline std::vector<Index> stack_z_source(const VoxelizedSample& s, const VoxelGridSpec& spec, int F,
                                         bool channels_first) {
  const Index nx = spec.nx(), ny = spec.ny(), nz = spec.nz();
  const Index C = nz * F;
  std::vector<Index> src(static_cast<std::size_t>(nx * ny * C), -1);
  for (std::size_t v = 0; v < s.coords.size(); ++v) {
    const auto& c = s.coords[v];
    for (Index f = 0; f < F; ++f) {
      const Index ch = c[2] * F + f;
      const Index dst = channels_first ? (ch * nx + c[0]) * ny + c[1] : (c[0] * ny + c[1]) * C + ch;
      src[static_cast<std::size_t>(dst)] = static_cast<Index>(v) * F + f;
    }
  }
  return src;
}

/// Dense (X, Y, Z*F) tensor labeled (+X, +Y, CHANNEL).
inline OrientedTensor stack_z(const VoxelizedSample& s, const VoxelGridSpec& spec, const Tensor& voxel_features) {
  const int F = static_cast<int>(voxel_features.rank() == 2 ? voxel_features.dim(1) : 0);
  if (voxel_features.rank() != 2 || voxel_features.dim(0) != static_cast<Index>(s.voxels())) {
    throw std::invalid_argument("stack_z: expected [" + std::to_string(s.voxels()) + ", F] features, got " +
                                shape_str(voxel_features.shape()));
  }
  const auto src = stack_z_source(s, spec, F, false);
  OrientedTensor out;
  out.data = Tensor(Shape{spec.nx(), spec.ny(), static_cast<Index>(spec.nz()) * F});
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= 0) {
      out.data[static_cast<Index>(i)] = voxel_features[src[i]];
    }
  }
  out.labels = {{Axis::X, +1}, {Axis::Y, +1}, {Axis::Channel, +1}};
  return out;
}

/// Differentiable channels-first stacking: (Z*F, X, Y) for the BEV network.
inline nn::Var stack_z_chw(const VoxelizedSample& s, const VoxelGridSpec& spec, const nn::Var& voxel_features,
                           int F) {
  auto src = std::make_shared<const std::vector<Index>>(stack_z_source(s, spec, F, true));
  return nn::gather(voxel_features, std::move(src), {static_cast<Index>(spec.nz()) * F, spec.nx(), spec.ny()});
}

}  // namespace cdsm::vox
