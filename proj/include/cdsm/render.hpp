// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Camera overlay and bird's-eye view plots with the result color code:
// predictions blue, matched targets green, false detections magenta,
// missed targets yellow.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <vector>

#include "cdsm/dataio.hpp"
#include "cdsm/evaluator.hpp"

namespace cdsm::render {

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kPrediction{0.0, 0.0, 1.0};
inline constexpr Rgb kMatchedTarget{0.0, 1.0, 0.0};
inline constexpr Rgb kFalseDetection{1.0, 0.0, 1.0};
inline constexpr Rgb kMissedTarget{1.0, 1.0, 0.0};
inline constexpr Rgb kBevBackground{0.08, 0.08, 0.08};
inline constexpr Rgb kLidar{0.55, 0.55, 0.55};
inline constexpr Rgb kRadar{1.0, 0.5, 0.0};

inline Rgb pixel(const data::Image& img, int x, int y) { return {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)}; }

inline void put(data::Image& img, int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) {
    return;
  }
  img.at(y, x, 0) = c.r;
  img.at(y, x, 1) = c.g;
  img.at(y, x, 2) = c.b;
}

inline void dot(data::Image& img, double x, double y, Rgb c, int radius = 0) {
  const int cx = static_cast<int>(std::floor(x)), cy = static_cast<int>(std::floor(y));
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      put(img, cx + dx, cy + dy, c);
    }
  }
}

/// Samples the segment at sub-pixel spacing; off-image parts are dropped.
inline void line(data::Image& img, double x0, double y0, double x1, double y1, Rgb c, int thickness = 1) {
  if (!std::isfinite(x0) || !std::isfinite(y0) || !std::isfinite(x1) || !std::isfinite(y1)) {
    return;
  }
  const double span = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const double limit = 4.0 * (img.width + img.height);
  if (span > limit) {
    return;
  }
  const int n = static_cast<int>(std::ceil(span * 2)) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    dot(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), c, (thickness - 1) / 2);
  }
}

inline void rect(data::Image& img, const Box2D& b, Rgb c, int thickness = 1) {
  line(img, b.u_min, b.v_min, b.u_max, b.v_min, c, thickness);
  line(img, b.u_max, b.v_min, b.u_max, b.v_max, c, thickness);
  line(img, b.u_max, b.v_max, b.u_min, b.v_max, c, thickness);
  line(img, b.u_min, b.v_max, b.u_min, b.v_min, c, thickness);
}

/// Wireframe of a cuboid; edges are clipped at a small positive depth.
inline void cuboid(data::Image& img, const Box3D& box, const geom::CameraCalib& calib, Rgb c, int thickness = 1) {
  constexpr double kNear = 0.1;
  const auto corners = geom::cuboid_corners(box);
  std::array<VcsPoint, 8> s{};
  for (std::size_t i = 0; i < 8; ++i) {
    s[i] = calib.pose.to_sensor(corners[i]);
  }
  auto uv = [&](const VcsPoint& p) {
    return std::array<double, 2>{calib.fx * (-p.y / p.x) + calib.cx, calib.fy * (-p.z / p.x) + calib.cy};
  };
  for (unsigned i = 0; i < 8; ++i) {
    for (unsigned j = i + 1; j < 8; ++j) {
      if (std::popcount(i ^ j) != 1) {
        continue;
      }
      VcsPoint a = s[i], b = s[j];
      if (a.x < kNear && b.x < kNear) {
        continue;
      }
      if (a.x < kNear || b.x < kNear) {
        VcsPoint& near = a.x < kNear ? a : b;
        const VcsPoint& far = a.x < kNear ? b : a;
        const double t = (kNear - far.x) / (near.x - far.x);
        near = {kNear, far.y + t * (near.y - far.y), far.z + t * (near.z - far.z)};
      }
      const auto p = uv(a), q = uv(b);
      line(img, p[0], p[1], q[0], q[1], c, thickness);
    }
  }
}

/// Label colors: green if matched, yellow if missed. Prediction colors:
/// blue if matched, magenta otherwise.
inline Rgb label_color(const eval::SceneMatch& m, std::size_t label) {
  return m.label_pred[label] >= 0 ? kMatchedTarget : kMissedTarget;
}
inline Rgb prediction_color(const eval::SceneMatch& m, std::size_t pred) {
  return m.pred_label[pred] >= 0 ? kPrediction : kFalseDetection;
}

inline data::Image camera_overlay_3d(const data::Scene& scene, const std::vector<Box3D>& preds,
                                     const std::vector<Box3D>& labels, const eval::SceneMatch& m) {
  data::Image img = scene.image;
  for (std::size_t i = 0; i < labels.size(); ++i) cuboid(img, labels[i], scene.calib, label_color(m, i));
  for (std::size_t i = 0; i < preds.size(); ++i) cuboid(img, preds[i], scene.calib, prediction_color(m, i));
  return img;
}

inline data::Image camera_overlay_2d(const data::Scene& scene, const std::vector<Box2D>& preds,
                                     const std::vector<Box2D>& labels, const eval::SceneMatch& m) {
  data::Image img = scene.image;
  for (std::size_t i = 0; i < labels.size(); ++i) rect(img, labels[i], label_color(m, i));
  for (std::size_t i = 0; i < preds.size(); ++i) rect(img, preds[i], prediction_color(m, i));
  return img;
}

/// Top-down view of the FOV: +X up, +Y left, `scale` pixels per meter.
struct BevCanvas {
  geom::FovBox fov;
  double scale = 8.0;

  int width() const { return static_cast<int>(std::lround((fov.y_max - fov.y_min) * scale)); }
  int height() const { return static_cast<int>(std::lround((fov.x_max - fov.x_min) * scale)); }
  double col(double y) const { return (fov.y_max - y) * scale; }
  double row(double x) const { return (fov.x_max - x) * scale; }
};

inline void footprint(data::Image& img, const BevCanvas& cv, const Box3D& b, Rgb c, int thickness = 2) {
  const auto q = bev_corners(b);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& p0 = q[i];
    const auto& p1 = q[(i + 1) % 4];
    line(img, cv.col(p0.y), cv.row(p0.x), cv.col(p1.y), cv.row(p1.x), c, thickness);
  }
  // Heading tick from the center to the front edge.
  const double fx = b.center.x + 0.5 * b.length * std::cos(b.yaw), fy = b.center.y + 0.5 * b.length * std::sin(b.yaw);
  line(img, cv.col(b.center.y), cv.row(b.center.x), cv.col(fy), cv.row(fx), c, 1);
}

inline data::Image bev_view(const data::Scene& scene, const BevCanvas& cv, const std::vector<Box3D>& preds,
                            const std::vector<Box3D>& labels, const eval::SceneMatch& m) {
  data::Image img(cv.width(), cv.height());
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      put(img, x, y, kBevBackground);
    }
  }
  for (const auto& p : scene.lidar) dot(img, cv.col(p.position.y), cv.row(p.position.x), kLidar);
  for (const auto& p : scene.radar) dot(img, cv.col(p.position.y), cv.row(p.position.x), kRadar, 1);
  for (std::size_t i = 0; i < labels.size(); ++i) footprint(img, cv, labels[i], label_color(m, i));
  for (std::size_t i = 0; i < preds.size(); ++i) footprint(img, cv, preds[i], prediction_color(m, i));
  return img;
}

}  // namespace cdsm::render
