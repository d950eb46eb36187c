// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Vehicle coordinate system, right-angle rotation algebra for tensor index
// rotation, and pinhole projection.
//
// Conventions:
//  * VCS: x forward, y left, z up, meters.
//  * Rotations are right-handed (counterclockwise seen from the positive end
//    of the axis). A chain is applied in listed order.
//  * Rotation axes are index-space coordinate axes of the tensor: axis 0 is
//    "X", 1 is "Y", 2 is "Z".
//  * Pixels: u rightward, v downward, origin at the top-left corner.
//  * The camera sensor frame is VCS-like (x along the optical axis, y left,
//    z up); CameraCalib::pose maps sensor coordinates into the VCS.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdsm/boxes.hpp"
#include "cdsm/tensor.hpp"

namespace cdsm::geom {

struct FovBox {
  double x_min = 0.0;
  double x_max = 80.0;
  double y_min = -40.0;
  double y_max = 40.0;
  double z_min = 0.0;
  double z_max = 5.0;

  void validate() const {
    if (!(x_min < x_max && y_min < y_max && z_min < z_max)) {
      throw std::invalid_argument("FovBox: min must be < max on every axis");
    }
  }
  bool operator==(const FovBox&) const = default;
};

/// Half-open containment [min, max) on every axis.
inline bool in_fov(const VcsPoint& p, const FovBox& fov) {
  return p.x >= fov.x_min && p.x < fov.x_max && p.y >= fov.y_min && p.y < fov.y_max &&
         p.z >= fov.z_min && p.z < fov.z_max;
}

// ---------------------------------------------------------------------------
// Quaternions and right-angle rotation chains

struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quaternion from_axis_angle(int axis, double radians) {
    const double h = 0.5 * radians;
    Quaternion q{std::cos(h), 0.0, 0.0, 0.0};
    const double s = std::sin(h);
    if (axis == 0) {
      q.x = s;
    } else if (axis == 1) {
      q.y = s;
    } else if (axis == 2) {
      q.z = s;
    } else {
      throw std::invalid_argument("Quaternion: axis must be 0, 1 or 2");
    }
    return q;
  }

  // Hamilton product; (a * b) applies b first, then a.
  friend Quaternion operator*(const Quaternion& a, const Quaternion& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
  }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion normalized() const {
    const double n = norm();
    if (!(n > 0.0)) {
      throw std::invalid_argument("Quaternion: zero norm");
    }
    return {w / n, x / n, y / n, z / n};
  }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }

  std::array<std::array<double, 3>, 3> to_matrix() const {
    return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
             {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
             {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
  }

  VcsPoint rotate(const VcsPoint& p) const {
    const auto m = to_matrix();
    return {m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z, m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z};
  }

  bool operator==(const Quaternion&) const = default;
};

struct AxisRotation {
  int axis = 0;     // 0 = X, 1 = Y, 2 = Z in tensor index space
  int degrees = 0;  // one of {0, 90, -90, 180}

  void validate() const {
    if (axis < 0 || axis > 2) {
      throw std::invalid_argument("AxisRotation: axis " + std::to_string(axis) + " out of range [0, 2]");
    }
    if (degrees != 0 && degrees != 90 && degrees != -90 && degrees != 180) {
      throw std::invalid_argument("AxisRotation: angle " + std::to_string(degrees) +
                                  " is not a right angle in {0, 90, -90, 180}");
    }
  }
  bool operator==(const AxisRotation&) const = default;
};

inline AxisRotation rot_x(int degrees) { return {0, degrees}; }
inline AxisRotation rot_y(int degrees) { return {1, degrees}; }
inline AxisRotation rot_z(int degrees) { return {2, degrees}; }

using RotationChain = std::vector<AxisRotation>;

/// Camera-to-BEV alignment: 180 degrees about Z, then 90 degrees about Y.
inline RotationChain default_camera_chain() { return {rot_z(180), rot_y(90)}; }

inline RotationChain inverse_chain(std::span<const AxisRotation> chain) {
  RotationChain inv;
  inv.reserve(chain.size());
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    const int d = (it->degrees == 180) ? 180 : -it->degrees;
    inv.push_back({it->axis, d});
  }
  return inv;
}

using IntMatrix3 = std::array<std::array<int, 3>, 3>;

inline IntMatrix3 identity_matrix3() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline int determinant(const IntMatrix3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

/// Composes the chain as quaternions (first listed applied first) and rounds
/// the resulting rotation matrix to its exact integer form.
inline IntMatrix3 quat_chain_to_matrix(std::span<const AxisRotation> chain) {
  Quaternion q;
  for (const AxisRotation& r : chain) {
    r.validate();
    q = Quaternion::from_axis_angle(r.axis, r.degrees * std::numbers::pi / 180.0) * q;
  }
  const auto m = q.normalized().to_matrix();
  IntMatrix3 out{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double r = std::round(m[i][j]);
      if (std::abs(m[i][j] - r) > 1e-9) {
        throw std::logic_error("quat_chain_to_matrix: non-integral rotation entry");
      }
      out[i][j] = static_cast<int>(r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oriented tensors

enum class Axis : std::uint8_t { X, Y, Z, Channel };

struct AxisLabel {
  Axis axis = Axis::Channel;
  int sign = +1;  // direction of increasing index

  AxisLabel operator-() const { return {axis, -sign}; }
  bool operator==(const AxisLabel&) const = default;
};

inline std::string to_string(const AxisLabel& l) {
  static const char* names[] = {"X", "Y", "Z", "CHANNEL"};
  return std::string(l.sign < 0 ? "-" : "+") + names[static_cast<int>(l.axis)];
}

struct OrientedTensor {
  Tensor data;
  std::vector<AxisLabel> labels;

  void validate() const {
    if (labels.size() != data.rank()) {
      throw std::invalid_argument("OrientedTensor: " + std::to_string(labels.size()) + " labels for rank " +
                                  std::to_string(data.rank()));
    }
    bool seen[3] = {false, false, false};
    for (const AxisLabel& l : labels) {
      if (l.axis == Axis::Channel) {
        continue;
      }
      auto& s = seen[static_cast<int>(l.axis)];
      if (s) {
        throw std::invalid_argument("OrientedTensor: duplicate spatial label " + to_string(l));
      }
      s = true;
    }
  }
};

/// True when the first two axes run along +X and +Y and the third is the
/// vertical (or vertically stacked channel) axis, as in a radar BEV tensor.
inline bool bev_oriented(const std::vector<AxisLabel>& labels) {
  return labels.size() >= 3 && labels[0] == AxisLabel{Axis::X, +1} && labels[1] == AxisLabel{Axis::Y, +1} &&
         (labels[2].axis == Axis::Z || labels[2].axis == Axis::Channel);
}

/// Index remapping realized by a rotation matrix on the leading three axes.
/// Output element `i` is read from input element `source[i]`.
struct RotationMap {
  IntMatrix3 matrix{};
  std::array<Index, 3> offset{};
  Shape in_shape;
  Shape out_shape;
  std::vector<Index> source;

  // Output axis that carries input axis `in_axis`, and the sign of the map.
  int out_axis_of(int in_axis) const {
    for (int a = 0; a < 3; ++a) {
      if (matrix[a][in_axis] != 0) {
        return a;
      }
    }
    throw std::logic_error("RotationMap: singular matrix");
  }
  int sign_of(int in_axis) const { return matrix[out_axis_of(in_axis)][in_axis]; }
};

inline RotationMap rotation_map(const Shape& shape, const IntMatrix3& m) {
  if (shape.size() < 3) {
    throw std::invalid_argument("cdsm_rotate: tensor rank " + std::to_string(shape.size()) + " < 3");
  }
  RotationMap map;
  map.matrix = m;
  map.in_shape = shape;
  map.out_shape = shape;
  for (int a = 0; a < 3; ++a) {
    int p = -1;
    for (int j = 0; j < 3; ++j) {
      if (m[a][j] != 0) {
        p = j;
      }
    }
    map.out_shape[a] = shape[p];
    // Shift by minus the smallest reachable coordinate so indices start at 0.
    map.offset[a] = m[a][p] < 0 ? shape[p] - 1 : 0;
  }
  const Index inner = numel(Shape(shape.begin() + 3, shape.end()));
  const Shape out_strides = strides_of(map.out_shape);
  map.source.assign(static_cast<std::size_t>(numel(shape)), 0);
  Index flat = 0;
  for (Index i0 = 0; i0 < shape[0]; ++i0) {
    for (Index i1 = 0; i1 < shape[1]; ++i1) {
      for (Index i2 = 0; i2 < shape[2]; ++i2) {
        const Index in[3] = {i0, i1, i2};
        Index out_base = 0;
        for (int a = 0; a < 3; ++a) {
          const Index o = m[a][0] * in[0] + m[a][1] * in[1] + m[a][2] * in[2] + map.offset[a];
          out_base += o * out_strides[a];
        }
        for (Index r = 0; r < inner; ++r, ++flat) {
          map.source[static_cast<std::size_t>(out_base + r)] = flat;
        }
      }
    }
  }
  return map;
}

inline RotationMap rotation_map(const Shape& shape, std::span<const AxisRotation> chain) {
  return rotation_map(shape, quat_chain_to_matrix(chain));
}

/// Rotates tensor indices by the chain: gathers every input value into its
/// rotated, offset position. Axes beyond the third are carried unchanged.
inline OrientedTensor cdsm_rotate(const OrientedTensor& t, std::span<const AxisRotation> chain) {
  t.validate();
  const RotationMap map = rotation_map(t.data.shape(), chain);
  OrientedTensor out;
  out.data = Tensor(map.out_shape);
  for (Index i = 0; i < out.data.size(); ++i) {
    out.data[i] = t.data[map.source[static_cast<std::size_t>(i)]];
  }
  out.labels = t.labels;
  for (int a = 0; a < 3; ++a) {
    for (int j = 0; j < 3; ++j) {
      if (map.matrix[a][j] != 0) {
        out.labels[a] = map.matrix[a][j] > 0 ? t.labels[j] : -t.labels[j];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pinhole camera

struct Pose {
  Quaternion rotation;  // sensor -> VCS
  VcsPoint translation;

  VcsPoint to_vcs(const VcsPoint& p) const { return rotation.rotate(p) + translation; }
  VcsPoint to_sensor(const VcsPoint& p) const { return rotation.conjugate().rotate(p - translation); }
  bool operator==(const Pose&) const = default;
};

struct CameraCalib {
  double fx = 400.0;
  double fy = 400.0;
  double cx = 256.0;
  double cy = 192.0;
  Pose pose;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) {
      throw std::invalid_argument("CameraCalib: focal lengths must be positive");
    }
    if (std::abs(pose.rotation.norm() - 1.0) > 1e-9) {
      throw std::invalid_argument("CameraCalib: pose rotation is not unit-norm");
    }
  }
  bool operator==(const CameraCalib&) const = default;
};

struct ImageSize {
  int width = 512;
  int height = 384;
  bool operator==(const ImageSize&) const = default;
};

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

class BehindCameraError : public std::domain_error {
 public:
  explicit BehindCameraError(double depth)
      : std::domain_error("point is behind the camera (depth " + std::to_string(depth) + ")"), depth_(depth) {}
  double depth() const { return depth_; }

 private:
  double depth_;
};

/// Pinhole mapping without the depth check; `depth` may be <= 0.
inline Projection project_unchecked(const VcsPoint& p, const CameraCalib& calib) {
  const VcsPoint s = calib.pose.to_sensor(p);
  Projection out;
  out.depth = s.x;
  out.u = calib.fx * (-s.y / s.x) + calib.cx;
  out.v = calib.fy * (-s.z / s.x) + calib.cy;
  return out;
}

inline Projection project_to_image(const VcsPoint& p, const CameraCalib& calib) {
  const Projection pr = project_unchecked(p, calib);
  if (!(pr.depth > 0.0)) {
    throw BehindCameraError(pr.depth);
  }
  return pr;
}

/// Inverse of project_to_image at a known depth.
inline VcsPoint unproject(double u, double v, double depth, const CameraCalib& calib) {
  const VcsPoint s{depth, -(u - calib.cx) * depth / calib.fx, -(v - calib.cy) * depth / calib.fy};
  return calib.pose.to_vcs(s);
}

inline std::array<VcsPoint, 8> cuboid_corners(const Box3D& b) {
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  std::array<VcsPoint, 8> out{};
  int k = 0;
  for (int dz : {-1, 1}) {
    for (int dx : {-1, 1}) {
      for (int dy : {-1, 1}) {
        const double lx = 0.5 * dx * b.length;
        const double ly = 0.5 * dy * b.width;
        out[k++] = {b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly, b.center.z + 0.5 * dz * b.height};
      }
    }
  }
  return out;
}

/// Tight image rectangle around the projected cuboid. Edges crossing the
/// camera plane are clipped at a small positive depth first. Returns nothing
/// when the cuboid is entirely behind the camera or off-image.
inline std::optional<Box2D> cuboid_to_bbox2d(const Box3D& box, const CameraCalib& calib, ImageSize image) {
  constexpr double kNearDepth = 1e-3;
  const auto corners = cuboid_corners(box);
  std::array<VcsPoint, 8> sensor{};
  for (std::size_t i = 0; i < 8; ++i) {
    sensor[i] = calib.pose.to_sensor(corners[i]);
  }
  double u_min = INFINITY, v_min = INFINITY, u_max = -INFINITY, v_max = -INFINITY;
  bool any = false;
  auto add = [&](const VcsPoint& s) {
    const double u = calib.fx * (-s.y / s.x) + calib.cx;
    const double v = calib.fy * (-s.z / s.x) + calib.cy;
    u_min = std::min(u_min, u);
    u_max = std::max(u_max, u);
    v_min = std::min(v_min, v);
    v_max = std::max(v_max, v);
    any = true;
  };
  for (const auto& s : sensor) {
    if (s.x >= kNearDepth) {
      add(s);
    }
  }
  if (!any) {
    return std::nullopt;
  }
  // Corner indices differ in exactly one bit along each cuboid edge.
  for (int i = 0; i < 8; ++i) {
    for (int bit : {1, 2, 4}) {
      const int j = i ^ bit;
      if (j < i) {
        continue;
      }
      const VcsPoint& a = sensor[i];
      const VcsPoint& b = sensor[j];
      if ((a.x >= kNearDepth) != (b.x >= kNearDepth)) {
        const double t = (kNearDepth - a.x) / (b.x - a.x);
        add(a + t * (b - a));
      }
    }
  }
  Box2D out;
  out.u_min = std::clamp(u_min, 0.0, static_cast<double>(image.width));
  out.u_max = std::clamp(u_max, 0.0, static_cast<double>(image.width));
  out.v_min = std::clamp(v_min, 0.0, static_cast<double>(image.height));
  out.v_max = std::clamp(v_max, 0.0, static_cast<double>(image.height));
  out.class_id = box.class_id;
  out.score = box.score;
  if (!(out.u_min < out.u_max && out.v_min < out.v_max)) {
    return std::nullopt;
  }
  return out;
}

}  // namespace cdsm::geom
