// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic driving scenes: flat-shaded cuboid cars on a textured ground
// plane seen by a forward camera, with sparse noisy radar returns, uniform
// radar clutter and a small LiDAR reference cloud.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdsm/boxes.hpp"
#include "cdsm/dataio.hpp"
#include "cdsm/geometry.hpp"

namespace cdsm::data {

struct SynthConfig {
  int image_width = 512;
  int image_height = 384;
  double fx = 400.0;
  double fy = 400.0;
  double camera_height = 1.5;

  int min_cars = 2;
  int max_cars = 6;
  double x_min = 6.0;
  double x_max = 75.0;
  double azimuth_fraction = 0.85;  // of the camera half field of view
  int max_placement_retries = 50;
  double placement_margin = 0.6;

  double length_mean = 4.5;
  double length_sd = 0.3;
  double width_mean = 1.85;
  double width_sd = 0.1;
  double height_mean = 1.55;
  double height_sd = 0.1;
  double aligned_yaw_prob = 0.7;
  double yaw_sd = 0.15;
  double moving_prob = 0.5;
  double speed_min = 2.0;
  double speed_max = 15.0;

  double depth_noise = 0.0;  // relative sd of the rendered depth of each car

  double radar_points_mean = 1.0;  // per car: 1 + Poisson(mean)
  double radar_dropout = 0.0;      // per-point drop probability
  double radar_sigma = 0.15;       // position noise, meters
  double radar_velocity_sigma = 0.2;
  double radar_rcs_car = 10.0;
  double radar_rcs_clutter = 5.0;
  double radar_rcs_sd = 3.0;
  double clutter_rate = 8.0;  // Poisson mean per scene
  double radar_assoc_margin = 0.5;

  double lidar_density = 120.0;  // points on a fully visible car at 10 m
  int lidar_ground_points = 300;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, image_width, image_height, fx, fy, camera_height,
                                                min_cars, max_cars, x_min, x_max, azimuth_fraction,
                                                max_placement_retries, placement_margin, length_mean, length_sd,
                                                width_mean, width_sd, height_mean, height_sd, aligned_yaw_prob,
                                                yaw_sd, moving_prob, speed_min, speed_max, depth_noise,
                                                radar_points_mean, radar_dropout, radar_sigma,
                                                radar_velocity_sigma, radar_rcs_car, radar_rcs_clutter, radar_rcs_sd,
                                                clutter_rate, radar_assoc_margin, lidar_density, lidar_ground_points)

struct SynthCar {
  Box3D box;
  double vx = 0.0;
  double vy = 0.0;
  std::array<double, 3> color{0.8, 0.1, 0.1};
};

inline CameraCalib synth_calib(const SynthConfig& c) {
  CameraCalib calib;
  calib.fx = c.fx;
  calib.fy = c.fy;
  calib.cx = c.image_width / 2.0;
  calib.cy = c.image_height / 2.0;
  calib.pose.translation = {0.0, 0.0, c.camera_height};
  return calib;
}

/// Planar distance from a point to a box footprint (0 inside).
inline double footprint_distance(const Box3D& b, double x, double y) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = x - b.center.x, dy = y - b.center.y;
  const double lx = std::abs(c * dx + s * dy) - 0.5 * b.length;
  const double ly = std::abs(-s * dx + c * dy) - 0.5 * b.width;
  const double ox = std::max(lx, 0.0), oy = std::max(ly, 0.0);
  return std::sqrt(ox * ox + oy * oy);
}

/// Index of the label whose footprint is nearest to (x, y) within
/// `margin`, or -1.
inline int nearest_label(const std::vector<Label>& labels, double x, double y, double margin) {
  int best = -1;
  double best_d = margin;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double d = footprint_distance(labels[i].box, x, y);
    if (d <= best_d && (best < 0 || d < best_d)) {
      best = static_cast<int>(i);
      best_d = d;
    }
  }
  return best;
}

namespace synth_detail {

struct Face {
  std::array<VcsPoint, 4> corners;
  VcsPoint normal;
  bool vertical = true;
};

// Faces of a cuboid with outward normals: front, rear, left, right, top.
inline std::vector<Face> faces(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const VcsPoint fwd{c, s, 0}, left{-s, c, 0}, up{0, 0, 1};
  const double hl = b.length / 2, hw = b.width / 2, hh = b.height / 2;
  auto at = [&](double a, double l, double u) {
    return b.center + (a * hl) * fwd + (l * hw) * left + (u * hh) * up;
  };
  return {
      {{at(1, -1, -1), at(1, 1, -1), at(1, 1, 1), at(1, -1, 1)}, fwd, true},
      {{at(-1, 1, -1), at(-1, -1, -1), at(-1, -1, 1), at(-1, 1, 1)}, -1.0 * fwd, true},
      {{at(1, 1, -1), at(-1, 1, -1), at(-1, 1, 1), at(1, 1, 1)}, left, true},
      {{at(-1, -1, -1), at(1, -1, -1), at(1, -1, 1), at(-1, -1, 1)}, -1.0 * left, true},
      {{at(1, -1, 1), at(1, 1, 1), at(-1, 1, 1), at(-1, -1, 1)}, up, false},
  };
}

inline VcsPoint face_center(const Face& f) {
  return 0.25 * (f.corners[0] + f.corners[1] + f.corners[2] + f.corners[3]);
}

struct Pt2 {
  double u, v;
};

// Fills the convex polygon, calling fn(x, y) for every covered pixel center.
template <typename Fn>
void fill_convex(const std::vector<Pt2>& poly, int w, int h, Fn fn) {
  if (poly.size() < 3) {
    return;
  }
  double area = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Pt2& a = poly[i];
    const Pt2& b = poly[(i + 1) % poly.size()];
    area += a.u * b.v - b.u * a.v;
  }
  if (std::abs(area) < 1e-12) {
    return;
  }
  const double orient = area > 0 ? 1.0 : -1.0;
  double umin = 1e18, umax = -1e18, vmin = 1e18, vmax = -1e18;
  for (const Pt2& p : poly) {
    umin = std::min(umin, p.u);
    umax = std::max(umax, p.u);
    vmin = std::min(vmin, p.v);
    vmax = std::max(vmax, p.v);
  }
  const int x0 = std::max(0, static_cast<int>(std::floor(umin)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(umax)));
  const int y0 = std::max(0, static_cast<int>(std::floor(vmin)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(vmax)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double pu = x + 0.5, pv = y + 0.5;
      bool inside = true;
      for (std::size_t i = 0; i < poly.size() && inside; ++i) {
        const Pt2& a = poly[i];
        const Pt2& b = poly[(i + 1) % poly.size()];
        inside = orient * ((b.u - a.u) * (pv - a.v) - (b.v - a.v) * (pu - a.u)) >= 0.0;
      }
      if (inside) {
        fn(x, y);
      }
    }
  }
}

inline double hull_area(std::vector<Pt2> pts) {
  std::sort(pts.begin(), pts.end(), [](Pt2 a, Pt2 b) { return a.u < b.u || (a.u == b.u && a.v < b.v); });
  auto cross = [](Pt2 o, Pt2 a, Pt2 b) { return (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u); };
  std::vector<Pt2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const Pt2& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k > 0 ? k - 1 : 0);
  double a = 0.0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const Pt2& p = hull[i];
    const Pt2& q = hull[(i + 1) % hull.size()];
    a += p.u * q.v - q.u * p.v;
  }
  return std::abs(a) / 2;
}

inline void render_background(Image& img, const CameraCalib& calib) {
  const double h = calib.pose.translation.z;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dy = -((x + 0.5) - calib.cx) / calib.fx;
      const double dz = -((y + 0.5) - calib.cy) / calib.fy;
      double rgb[3];
      if (dz < -1e-6) {
        const double t = h / -dz;
        const double gx = calib.pose.translation.x + t;
        const double gy = calib.pose.translation.y + t * dy;
        const bool checker = (static_cast<long>(std::floor(gx / 2.0)) + static_cast<long>(std::floor(gy / 2.0))) % 2;
        double g = 0.36 + (checker ? 0.04 : 0.0);
        for (double lane : {-5.25, -1.75, 1.75, 5.25}) {
          if (std::abs(gy - lane) < 0.08 && std::fmod(std::abs(gx), 6.0) < 3.0) {
            g = 0.85;
          }
        }
        const double fog = std::min(1.0, t / 160.0);
        rgb[0] = g * (1 - fog) + 0.72 * fog;
        rgb[1] = g * (1 - fog) + 0.78 * fog;
        rgb[2] = g * (1 - fog) + 0.86 * fog;
      } else {
        const double a = std::clamp(dz * 3.0, 0.0, 1.0);
        rgb[0] = 0.74 - 0.2 * a;
        rgb[1] = 0.81 - 0.12 * a;
        rgb[2] = 0.92 - 0.02 * a;
      }
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = rgb[c];
      }
    }
  }
}

}  // namespace synth_detail

/// Places cars without footprint overlap. Sets `incomplete` when a car
/// could not be placed within the retry budget.
inline std::vector<SynthCar> place_cars(std::mt19937_64& rng, const SynthConfig& cfg, bool& incomplete) {
  std::uniform_int_distribution<int> count(cfg.min_cars, std::max(cfg.min_cars, cfg.max_cars));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> nrm(0.0, 1.0);
  const double half_fov = std::atan((cfg.image_width / 2.0) / cfg.fx) * cfg.azimuth_fraction;
  const int n = count(rng);
  std::vector<SynthCar> cars;
  incomplete = false;
  static const std::array<std::array<double, 3>, 6> kPalette{{{0.80, 0.12, 0.10},
                                                              {0.10, 0.25, 0.75},
                                                              {0.92, 0.92, 0.90},
                                                              {0.08, 0.08, 0.10},
                                                              {0.85, 0.65, 0.10},
                                                              {0.15, 0.55, 0.25}}};
  for (int i = 0; i < n && !incomplete; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_placement_retries && !placed; ++attempt) {
      SynthCar car;
      const double x = cfg.x_min + (cfg.x_max - cfg.x_min) * uni(rng);
      const double az = (2.0 * uni(rng) - 1.0) * half_fov;
      car.box.length = std::max(3.0, cfg.length_mean + cfg.length_sd * nrm(rng));
      car.box.width = std::max(1.4, cfg.width_mean + cfg.width_sd * nrm(rng));
      car.box.height = std::max(1.2, cfg.height_mean + cfg.height_sd * nrm(rng));
      car.box.center = {x, x * std::tan(az), car.box.height / 2};
      if (uni(rng) < cfg.aligned_yaw_prob) {
        car.box.yaw = wrap_angle((uni(rng) < 0.5 ? 0.0 : std::numbers::pi) + cfg.yaw_sd * nrm(rng));
      } else {
        car.box.yaw = wrap_angle((2.0 * uni(rng) - 1.0) * std::numbers::pi);
      }
      car.box.class_id = kCar;
      if (uni(rng) < cfg.moving_prob) {
        const double v = cfg.speed_min + (cfg.speed_max - cfg.speed_min) * uni(rng);
        car.vx = v * std::cos(car.box.yaw);
        car.vy = v * std::sin(car.box.yaw);
      }
      car.color = kPalette[static_cast<std::size_t>(uni(rng) * kPalette.size()) % kPalette.size()];
      Box3D inflated = car.box;
      inflated.length += cfg.placement_margin;
      inflated.width += cfg.placement_margin;
      placed = true;
      for (const SynthCar& o : cars) {
        Box3D other = o.box;
        other.length += cfg.placement_margin;
        other.width += cfg.placement_margin;
        if (bev_iou(inflated, other) > 0.0) {
          placed = false;
          break;
        }
      }
      if (placed) {
        cars.push_back(car);
      }
    }
    incomplete = !placed;
  }
  return cars;
}

/// Renders a scene for a fixed set of cars. All randomness (depth noise,
/// radar sampling, clutter, LiDAR) is drawn from `rng`.
inline Scene render_scene(std::mt19937_64& rng, const SynthConfig& cfg, const std::vector<SynthCar>& cars,
                          const std::string& id) {
  using namespace synth_detail;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> nrm(0.0, 1.0);
  Scene scene;
  scene.id = id;
  scene.calib = synth_calib(cfg);
  const CameraCalib& calib = scene.calib;
  const VcsPoint cam = calib.pose.translation;
  const int W = cfg.image_width, H = cfg.image_height;
  scene.image = Image(W, H);
  render_background(scene.image, calib);

  // Depth-cue noise: each car is drawn along its true viewing ray at a
  // perturbed range, so apparent size and ground contact agree with a
  // wrong distance.
  std::vector<Box3D> drawn;
  std::vector<double> depth_scale;
  for (const SynthCar& car : cars) {
    const double eps = cfg.depth_noise > 0.0 ? std::max(-0.5, cfg.depth_noise * nrm(rng)) : 0.0;
    Box3D b = car.box;
    b.center.x = cam.x + (1.0 + eps) * (car.box.center.x - cam.x);
    b.center.y = cam.y + (1.0 + eps) * (car.box.center.y - cam.y);
    drawn.push_back(b);
    depth_scale.push_back(1.0 + eps);
  }
  std::vector<std::size_t> order(cars.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return norm(drawn[a].center - cam) > norm(drawn[b].center - cam);
  });
  std::vector<int> owner(static_cast<std::size_t>(W) * H, -1);
  const VcsPoint light{-0.3, 0.5, 0.8};
  const double light_n = norm(light);
  std::vector<double> hull(cars.size(), 0.0);
  for (std::size_t idx : order) {
    const Box3D& b = drawn[idx];
    std::vector<Pt2> all;
    for (const VcsPoint& p : geom::cuboid_corners(b)) {
      const auto pr = geom::project_unchecked(p, calib);
      if (pr.depth > 0.5) {
        all.push_back({pr.u, pr.v});
      }
    }
    hull[idx] = all.size() == 8 ? hull_area(all) : 0.0;
    for (const Face& f : faces(b)) {
      if (dot(cam - face_center(f), f.normal) <= 0.0) {
        continue;
      }
      std::vector<Pt2> poly;
      bool ok = true;
      for (const VcsPoint& p : f.corners) {
        const auto pr = geom::project_unchecked(p, calib);
        ok = ok && pr.depth > 0.5;
        poly.push_back({pr.u, pr.v});
      }
      if (!ok) {
        continue;
      }
      const double shade = f.vertical ? 0.45 + 0.45 * std::max(0.0, dot(f.normal, light) / light_n) : 1.0;
      const auto& col = cars[idx].color;
      fill_convex(poly, W, H, [&](int x, int y) {
        for (int c = 0; c < 3; ++c) {
          scene.image.at(y, x, c) = std::clamp(col[static_cast<std::size_t>(c)] * shade + 0.03, 0.0, 1.0);
        }
        owner[static_cast<std::size_t>(y) * W + x] = static_cast<int>(idx);
      });
    }
  }
  for (double& v : scene.image.rgb) {
    v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  }
  std::vector<double> visible(cars.size(), 0.0);
  for (int o : owner) {
    if (o >= 0) visible[static_cast<std::size_t>(o)] += 1.0;
  }
  for (std::size_t i = 0; i < cars.size(); ++i) {
    Label l;
    l.box = cars[i].box;
    l.visibility = hull[i] > 0.0 ? std::clamp(visible[i] / hull[i], 0.0, 1.0) : 0.0;
    scene.labels.push_back(l);
  }

  // Radar: returns from the vertical faces facing the sensor at the origin.
  const VcsPoint radar_origin{0.0, 0.0, 0.0};
  std::vector<RadarPoint> radar;
  std::poisson_distribution<int> extra(std::max(1e-9, cfg.radar_points_mean));
  for (const SynthCar& car : cars) {
    const int n = 1 + (cfg.radar_points_mean > 0.0 ? extra(rng) : 0);
    std::vector<Face> vis;
    std::vector<double> weight;
    double total = 0.0;
    for (const Face& f : faces(car.box)) {
      if (!f.vertical) continue;
      const VcsPoint to = radar_origin - face_center(f);
      const double cosang = dot(to, f.normal) / std::max(1e-9, norm(to));
      if (cosang <= 0.0) continue;
      const double w = norm(f.corners[1] - f.corners[0]) * cosang;
      vis.push_back(f);
      weight.push_back(w);
      total += w;
    }
    for (int k = 0; k < n; ++k) {
      const double pick = uni(rng) * total;
      const double s = uni(rng);
      const double hz = 0.2 + 0.7 * uni(rng);
      const double drop = uni(rng);
      const double ex = nrm(rng), ey = nrm(rng), ez = nrm(rng);
      const double evx = nrm(rng), evy = nrm(rng), ercs = nrm(rng);
      if (vis.empty() || drop < cfg.radar_dropout) continue;
      std::size_t fi = 0;
      for (double acc = weight[0]; acc < pick && fi + 1 < vis.size(); acc += weight[++fi]) {
      }
      const Face& f = vis[fi];
      const VcsPoint base = f.corners[0] + s * (f.corners[1] - f.corners[0]);
      RadarPoint p;
      p.position = {base.x + cfg.radar_sigma * ex, base.y + cfg.radar_sigma * ey,
                    car.box.center.z - car.box.height / 2 + hz * car.box.height + 0.5 * cfg.radar_sigma * ez};
      p.vx = car.vx + cfg.radar_velocity_sigma * evx;
      p.vy = car.vy + cfg.radar_velocity_sigma * evy;
      p.rcs = cfg.radar_rcs_car + cfg.radar_rcs_sd * ercs;
      radar.push_back(p);
    }
  }
  const FovBox fov;
  std::poisson_distribution<int> clutter(std::max(1e-9, cfg.clutter_rate));
  const int n_clutter = cfg.clutter_rate > 0.0 ? clutter(rng) : 0;
  for (int k = 0; k < n_clutter; ++k) {
    RadarPoint p;
    p.position = {fov.x_min + (fov.x_max - fov.x_min) * uni(rng), fov.y_min + (fov.y_max - fov.y_min) * uni(rng),
                  3.0 * uni(rng)};
    p.vx = 0.3 * nrm(rng);
    p.vy = 0.3 * nrm(rng);
    p.rcs = cfg.radar_rcs_clutter + cfg.radar_rcs_sd * nrm(rng);
    radar.push_back(p);
  }
  scene.radar = clip_pointcloud(radar, fov);
  for (const RadarPoint& p : scene.radar) {
    const int i = nearest_label(scene.labels, p.position.x, p.position.y, cfg.radar_assoc_margin);
    if (i >= 0) ++scene.labels[static_cast<std::size_t>(i)].n_radar_points;
  }

  // LiDAR reference cloud (rendering only).
  std::vector<LidarPoint> lidar;
  for (std::size_t i = 0; i < cars.size(); ++i) {
    const Box3D& b = cars[i].box;
    const double d = std::max(10.0, norm(b.center - cam));
    const double mean = cfg.lidar_density * (10.0 / d) * (10.0 / d) * scene.labels[i].visibility;
    std::poisson_distribution<int> count(std::max(1e-9, mean));
    const int n = mean > 0.0 ? count(rng) : 0;
    std::vector<Face> vis;
    for (const Face& f : faces(b)) {
      if (dot(cam - face_center(f), f.normal) > 0.0) vis.push_back(f);
    }
    for (int k = 0; k < n && !vis.empty(); ++k) {
      const Face& f = vis[static_cast<std::size_t>(uni(rng) * vis.size()) % vis.size()];
      const double s = uni(rng), t = uni(rng);
      const VcsPoint p = f.corners[0] + s * (f.corners[1] - f.corners[0]) + t * (f.corners[3] - f.corners[0]);
      lidar.push_back({{p.x + 0.02 * nrm(rng), p.y + 0.02 * nrm(rng), p.z + 0.02 * nrm(rng)}, 0.6});
      ++scene.labels[i].n_lidar_points;
    }
  }
  for (int k = 0; k < cfg.lidar_ground_points; ++k) {
    const double x = 2.0 + 58.0 * uni(rng);
    lidar.push_back({{x, (2.0 * uni(rng) - 1.0) * 0.6 * x, 0.0}, 0.1});
  }
  scene.lidar = clip_pointcloud(lidar, fov);

  scene.metadata["generator"] = "cdsm-synth-1";
  scene.metadata["depth_scale"] = depth_scale;
  return scene;
}

/// Deterministic scene for (seed, config).
inline Scene generate_synthetic_scene(std::uint64_t seed, const SynthConfig& cfg, const std::string& id = "scene") {
  if (cfg.min_cars < 0 || cfg.max_cars < cfg.min_cars || cfg.image_width <= 0 || cfg.image_height <= 0 ||
      !(cfg.x_max > cfg.x_min) || cfg.radar_dropout < 0.0 || cfg.radar_dropout > 1.0) {
    throw std::invalid_argument("generate_synthetic_scene: invalid configuration");
  }
  std::mt19937_64 rng(seed);
  bool incomplete = false;
  const std::vector<SynthCar> cars = place_cars(rng, cfg, incomplete);
  Scene s = render_scene(rng, cfg, cars, id);
  s.metadata["seed"] = seed;
  s.metadata["placement_incomplete"] = incomplete;
  s.metadata["placed_cars"] = cars.size();
  return s;
}

}  // namespace cdsm::data
