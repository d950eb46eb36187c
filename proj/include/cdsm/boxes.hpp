// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace cdsm {

/// Point in the vehicle coordinate system: x forward, y left, z up (meters).
struct VcsPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend VcsPoint operator+(VcsPoint a, VcsPoint b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend VcsPoint operator-(VcsPoint a, VcsPoint b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend VcsPoint operator*(double s, VcsPoint a) { return {s * a.x, s * a.y, s * a.z}; }
  bool operator==(const VcsPoint&) const = default;

  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline double dot(VcsPoint a, VcsPoint b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(VcsPoint a) { return std::sqrt(dot(a, a)); }

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double r = std::fmod(a, kTwoPi);
  if (r <= -std::numbers::pi) {
    r += kTwoPi;
  } else if (r > std::numbers::pi) {
    r -= kTwoPi;
  }
  return r;
}

struct Box3D {
  VcsPoint center;
  double length = 1.0;  // along heading
  double width = 1.0;
  double height = 1.0;
  double yaw = 0.0;  // about +z, radians
  int class_id = 0;
  double score = 1.0;

  bool operator==(const Box3D&) const = default;
};

struct Box2D {
  double u_min = 0.0;
  double v_min = 0.0;
  double u_max = 0.0;
  double v_max = 0.0;
  int class_id = 0;
  double score = 1.0;

  double width() const { return u_max - u_min; }
  double height() const { return v_max - v_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool operator==(const Box2D&) const = default;
};

inline double iou2d(const Box2D& a, const Box2D& b) {
  const double iw = std::min(a.u_max, b.u_max) - std::max(a.u_min, b.u_min);
  const double ih = std::min(a.v_max, b.v_max) - std::max(a.v_min, b.v_min);
  if (iw <= 0.0 || ih <= 0.0) {
    return 0.0;
  }
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

using Polygon = std::vector<Point2>;

/// Counter-clockwise footprint corners of a yawed box in the XY plane.
inline std::array<Point2, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double hl = 0.5 * b.length;
  const double hw = 0.5 * b.width;
  const std::array<Point2, 4> local = {{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Point2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {b.center.x + c * local[i].x - s * local[i].y, b.center.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

inline double polygon_area(const Polygon& p) {
  double a = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Point2& u = p[i];
    const Point2& v = p[(i + 1) % p.size()];
    a += u.x * v.y - v.x * u.y;
  }
  return 0.5 * std::abs(a);
}

// Sutherland-Hodgman clip of `subject` against a convex CCW `clip` polygon.
inline Polygon clip_convex(const Polygon& subject, const Polygon& clip) {
  Polygon out = subject;
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Point2 a = clip[e];
    const Point2 b = clip[(e + 1) % clip.size()];
    auto side = [&](Point2 p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); };
    Polygon in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Point2 p = in[i];
      const Point2 q = in[(i + 1) % in.size()];
      const double sp = side(p);
      const double sq = side(q);
      if (sp >= 0.0) {
        out.push_back(p);
      }
      if ((sp >= 0.0) != (sq >= 0.0)) {
        const double t = sp / (sp - sq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
  }
  return out;
}

/// IoU of the yawed BEV footprints of two boxes.
inline double bev_iou(const Box3D& a, const Box3D& b) {
  const double reach = 0.5 * (std::hypot(a.length, a.width) + std::hypot(b.length, b.width));
  if (std::hypot(a.center.x - b.center.x, a.center.y - b.center.y) > reach) {
    return 0.0;
  }
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  const Polygon pa(ca.begin(), ca.end());
  const Polygon pb(cb.begin(), cb.end());
  const double inter = polygon_area(clip_convex(pa, pb));
  const double uni = a.length * a.width + b.length * b.width - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace cdsm
