// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Scene schema, preprocessing and on-disk format.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdsm/boxes.hpp"
#include "cdsm/geometry.hpp"

namespace cdsm::data {

namespace fs = std::filesystem;
using json = nlohmann::json;
using geom::CameraCalib;
using geom::FovBox;

enum ObjectClass : int { kCar = 0, kPedestrian = 1 };

struct RadarPoint {
  VcsPoint position;
  double vx = 0.0;
  double vy = 0.0;
  double rcs = 0.0;
  bool operator==(const RadarPoint&) const = default;
};

struct LidarPoint {
  VcsPoint position;
  double intensity = 0.0;
  bool operator==(const LidarPoint&) const = default;
};

struct Label {
  Box3D box;
  double visibility = 1.0;
  int n_lidar_points = 0;
  int n_radar_points = 0;
  bool operator==(const Label&) const = default;
};

/// Interleaved RGB image, row-major, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill) {}

  double& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

struct Scene {
  std::string id;
  Image image;
  std::vector<RadarPoint> radar;
  std::vector<LidarPoint> lidar;  // rendering reference only
  CameraCalib calib;
  std::vector<Label> labels;
  json metadata = json::object();

  bool operator==(const Scene& o) const {
    return id == o.id && image == o.image && radar == o.radar && lidar == o.lidar && calib == o.calib &&
           labels == o.labels && metadata == o.metadata;
  }
};

// ---------------------------------------------------------------------------
// Letterbox

struct LetterboxTransform {
  double scale = 1.0;
  double pad_x = 0.0;
  double pad_y = 0.0;
  int content_width = 0;
  int content_height = 0;

  Box2D to_target(const Box2D& b) const {
    Box2D o = b;
    o.u_min = b.u_min * scale + pad_x;
    o.u_max = b.u_max * scale + pad_x;
    o.v_min = b.v_min * scale + pad_y;
    o.v_max = b.v_max * scale + pad_y;
    return o;
  }

  Box2D to_source(const Box2D& b) const {
    Box2D o = b;
    o.u_min = (b.u_min - pad_x) / scale;
    o.u_max = (b.u_max - pad_x) / scale;
    o.v_min = (b.v_min - pad_y) / scale;
    o.v_max = (b.v_max - pad_y) / scale;
    return o;
  }

  CameraCalib apply(const CameraCalib& c) const {
    CameraCalib o = c;
    o.fx = c.fx * scale;
    o.fy = c.fy * scale;
    o.cx = c.cx * scale + pad_x;
    o.cy = c.cy * scale + pad_y;
    return o;
  }
};

inline LetterboxTransform letterbox_transform(int width, int height, int target_w, int target_h) {
  if (width <= 0 || height <= 0 || target_w <= 0 || target_h <= 0) {
    throw std::invalid_argument("letterbox: dimensions must be positive");
  }
  LetterboxTransform t;
  t.scale = std::min(static_cast<double>(target_w) / width, static_cast<double>(target_h) / height);
  t.content_width = std::min(target_w, static_cast<int>(std::lround(width * t.scale)));
  t.content_height = std::min(target_h, static_cast<int>(std::lround(height * t.scale)));
  t.pad_x = (target_w - t.content_width) / 2;
  t.pad_y = (target_h - t.content_height) / 2;
  return t;
}

struct LetterboxResult {
  Image image;
  LetterboxTransform transform;
};

/// Aspect-preserving bilinear resize with symmetric zero padding.
inline LetterboxResult letterbox(const Image& src, int target_w, int target_h) {
  if (src.width <= 0 || src.height <= 0) {
    throw std::invalid_argument("letterbox: zero-size input image");
  }
  LetterboxResult r;
  r.transform = letterbox_transform(src.width, src.height, target_w, target_h);
  const auto& t = r.transform;
  r.image = Image(target_w, target_h, 0.0);
  if (t.scale == 1.0 && t.content_width == src.width && t.content_height == src.height) {
    for (int y = 0; y < src.height; ++y) {
      for (int x = 0; x < src.width; ++x) {
        for (int c = 0; c < 3; ++c) {
          r.image.at(y + static_cast<int>(t.pad_y), x + static_cast<int>(t.pad_x), c) = src.at(y, x, c);
        }
      }
    }
    return r;
  }
  for (int y = 0; y < t.content_height; ++y) {
    const double sy = std::clamp((y + 0.5) / t.scale - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - y0;
    for (int x = 0; x < t.content_width; ++x) {
      const double sx = std::clamp((x + 0.5) / t.scale - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c)) +
                         fy * ((1 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c));
        r.image.at(y + static_cast<int>(t.pad_y), x + static_cast<int>(t.pad_x), c) = v;
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Point clouds and labels

template <typename PointT>
std::vector<PointT> clip_pointcloud(const std::vector<PointT>& points, const FovBox& fov) {
  std::vector<PointT> out;
  out.reserve(points.size());
  for (const PointT& p : points) {
    if (geom::in_fov(p.position, fov)) {
      out.push_back(p);
    }
  }
  return out;
}

enum class FilterMode { Camera2d, Radar3d, Fusion3d };

inline constexpr double kMinCameraVisibility = 0.40;

inline bool keep_label(const Label& l, FilterMode mode, int class_id, const FovBox& fov) {
  if (l.box.class_id != class_id) {
    return false;
  }
  const VcsPoint c{l.box.center.x, l.box.center.y, std::clamp(l.box.center.z, fov.z_min, fov.z_max - 1e-9)};
  if (!geom::in_fov(c, fov)) {
    return false;
  }
  const bool camera = l.visibility > kMinCameraVisibility;
  const bool radar = l.n_radar_points >= 1;
  switch (mode) {
    case FilterMode::Camera2d:
      return camera;
    case FilterMode::Radar3d:
      return radar;
    case FilterMode::Fusion3d:
      return camera || radar;
  }
  return false;
}

/// Keeps labels of `class_id` with centers inside the FOV (height is not
/// checked) that the chosen sensor mode can observe.
inline std::vector<Label> filter_labels(const std::vector<Label>& labels, FilterMode mode, int class_id = kCar,
                                        const FovBox& fov = {}) {
  std::vector<Label> out;
  for (const Label& l : labels) {
    if (keep_label(l, mode, class_id, fov)) {
      out.push_back(l);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset statistics

struct ClassStats {
  std::int64_t total = 0;
  std::int64_t visible_over_40 = 0;
  std::int64_t with_lidar = 0;
  std::int64_t with_radar = 0;
  double mean_lidar_points = 0.0;
  double mean_radar_points = 0.0;
  bool operator==(const ClassStats&) const = default;
};

struct DatasetStats {
  std::int64_t scenes = 0;
  std::map<int, ClassStats> per_class;
  ClassStats all_classes;
  double mean_lidar_points_per_sample = 0.0;
  double mean_radar_points_per_sample = 0.0;
  bool operator==(const DatasetStats&) const = default;
};

inline DatasetStats dataset_stats(const std::vector<Scene>& scenes) {
  DatasetStats s;
  std::map<int, std::pair<double, double>> sums;
  std::pair<double, double> all_sums{0.0, 0.0};
  double lidar_total = 0.0, radar_total = 0.0;
  auto count = [](ClassStats& c, std::pair<double, double>& sum, const Label& l) {
    ++c.total;
    c.visible_over_40 += l.visibility > kMinCameraVisibility ? 1 : 0;
    c.with_lidar += l.n_lidar_points > 0 ? 1 : 0;
    c.with_radar += l.n_radar_points > 0 ? 1 : 0;
    sum.first += l.n_lidar_points;
    sum.second += l.n_radar_points;
  };
  for (const Scene& sc : scenes) {
    ++s.scenes;
    lidar_total += static_cast<double>(sc.lidar.size());
    radar_total += static_cast<double>(sc.radar.size());
    for (const Label& l : sc.labels) {
      count(s.per_class[l.box.class_id], sums[l.box.class_id], l);
      count(s.all_classes, all_sums, l);
    }
  }
  auto finish = [](ClassStats& c, const std::pair<double, double>& sum) {
    if (c.total > 0) {
      c.mean_lidar_points = sum.first / static_cast<double>(c.total);
      c.mean_radar_points = sum.second / static_cast<double>(c.total);
    }
  };
  for (auto& [k, c] : s.per_class) {
    finish(c, sums[k]);
  }
  finish(s.all_classes, all_sums);
  if (s.scenes > 0) {
    s.mean_lidar_points_per_sample = lidar_total / static_cast<double>(s.scenes);
    s.mean_radar_points_per_sample = radar_total / static_cast<double>(s.scenes);
  }
  return s;
}

inline json to_json(const ClassStats& c) {
  return {{"total_labels", c.total},
          {"visible_over_40", c.visible_over_40},
          {"with_lidar", c.with_lidar},
          {"with_radar", c.with_radar},
          {"mean_lidar_points_per_label", c.mean_lidar_points},
          {"mean_radar_points_per_label", c.mean_radar_points}};
}

inline json to_json(const DatasetStats& s) {
  json per = json::object();
  for (const auto& [k, c] : s.per_class) {
    per[std::to_string(k)] = to_json(c);
  }
  return {{"scenes", s.scenes},
          {"all_classes", to_json(s.all_classes)},
          {"per_class", per},
          {"mean_lidar_points_per_sample", s.mean_lidar_points_per_sample},
          {"mean_radar_points_per_sample", s.mean_radar_points_per_sample}};
}

// ---------------------------------------------------------------------------
// Files

class SceneParseError : public std::runtime_error {
 public:
  SceneParseError(const std::string& file, const std::string& location, const std::string& message)
      : std::runtime_error(file + ": " + location + ": " + message), file_(file), location_(location) {}
  const std::string& file() const { return file_; }
  const std::string& location() const { return location_; }

 private:
  std::string file_;
  std::string location_;
};

/// Binary PPM (P6, maxval 255). Values are quantized to k/255.
inline void save_ppm(const Image& img, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw std::runtime_error("cannot write image: " + path.string());
  }
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.rgb.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.rgb[i], 0.0, 1.0) * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Loads a binary PPM and normalizes pixel values to [0, 1].
inline Image load_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw SceneParseError(path.string(), "header", "cannot open image");
  }
  auto token = [&]() {
    std::string t;
    while (is >> std::ws && is.peek() == '#') {
      std::string skip;
      std::getline(is, skip);
    }
    is >> t;
    return t;
  };
  if (token() != "P6") {
    throw SceneParseError(path.string(), "header", "expected binary PPM magic P6");
  }
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw SceneParseError(path.string(), "header", "malformed dimensions");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw SceneParseError(path.string(), "header", "unsupported dimensions or maxval");
  }
  is.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw SceneParseError(path.string(), "pixel data", "truncated image");
  }
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.rgb[i] = bytes[i] / static_cast<double>(maxval);
  }
  return img;
}

inline json vec3(const VcsPoint& p) { return json::array({p.x, p.y, p.z}); }

inline json box_to_json(const Box3D& b) {
  return {{"class_id", b.class_id}, {"center", vec3(b.center)}, {"size", {b.length, b.width, b.height}},
          {"yaw", b.yaw},           {"score", b.score}};
}

inline json calib_to_json(const CameraCalib& c) {
  const auto& q = c.pose.rotation;
  return {{"fx", c.fx},
          {"fy", c.fy},
          {"cx", c.cx},
          {"cy", c.cy},
          {"pose", {{"rotation_wxyz", {q.w, q.x, q.y, q.z}}, {"translation", vec3(c.pose.translation)}}}};
}

/// Writes `<dir>/<id>.json` and the image as `<dir>/<id>.ppm`.
inline void save_scene(const Scene& scene, const fs::path& dir) {
  fs::create_directories(dir);
  json j;
  j["format"] = "cdsm-scene";
  j["version"] = 1;
  j["id"] = scene.id;
  j["image"] = {{"file", scene.id + ".ppm"}, {"width", scene.image.width}, {"height", scene.image.height}};
  j["calib"] = calib_to_json(scene.calib);
  json radar = json::array();
  for (const auto& p : scene.radar) {
    radar.push_back({p.position.x, p.position.y, p.position.z, p.vx, p.vy, p.rcs});
  }
  j["radar"] = {{"fields", {"x", "y", "z", "vx", "vy", "rcs"}}, {"points", radar}};
  json lidar = json::array();
  for (const auto& p : scene.lidar) {
    lidar.push_back({p.position.x, p.position.y, p.position.z, p.intensity});
  }
  j["lidar"] = {{"fields", {"x", "y", "z", "intensity"}}, {"points", lidar}};
  json labels = json::array();
  for (const auto& l : scene.labels) {
    json lj = box_to_json(l.box);
    lj["visibility"] = l.visibility;
    lj["n_lidar_points"] = l.n_lidar_points;
    lj["n_radar_points"] = l.n_radar_points;
    labels.push_back(lj);
  }
  j["labels"] = labels;
  j["metadata"] = scene.metadata;
  std::ofstream os(dir / (scene.id + ".json"));
  if (!os) {
    throw std::runtime_error("cannot write scene: " + (dir / (scene.id + ".json")).string());
  }
  os << j.dump(1) << '\n';
  save_ppm(scene.image, dir / (scene.id + ".ppm"));
}

namespace detail {

class Reader {
 public:
  Reader(const json& root, std::string file) : root_(root), file_(std::move(file)) {}

  const json& at(const json& obj, const std::string& key, const std::string& where) const {
    if (!obj.is_object() || !obj.contains(key)) {
      fail(where + "/" + key, "missing field");
    }
    return obj.at(key);
  }
  double number(const json& obj, const std::string& key, const std::string& where) const {
    const json& v = at(obj, key, where);
    if (!v.is_number()) {
      fail(where + "/" + key, "expected number");
    }
    return v.get<double>();
  }
  int integer(const json& obj, const std::string& key, const std::string& where) const {
    const json& v = at(obj, key, where);
    if (!v.is_number_integer()) {
      fail(where + "/" + key, "expected integer");
    }
    return v.get<int>();
  }
  std::vector<double> numbers(const json& v, std::size_t n, const std::string& where) const {
    if (!v.is_array() || v.size() != n) {
      fail(where, "expected array of " + std::to_string(n) + " numbers");
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < n; ++i) {
      if (!v[i].is_number()) {
        fail(where + "/" + std::to_string(i), "expected number");
      }
      out.push_back(v[i].get<double>());
    }
    return out;
  }
  [[noreturn]] void fail(const std::string& where, const std::string& msg) const {
    throw SceneParseError(file_, where.empty() ? "/" : where, msg);
  }
  const json& root() const { return root_; }

 private:
  const json& root_;
  std::string file_;
};

}  // namespace detail

inline CameraCalib calib_from_json(const json& c, const detail::Reader& r, const std::string& where) {
  CameraCalib calib;
  calib.fx = r.number(c, "fx", where);
  calib.fy = r.number(c, "fy", where);
  calib.cx = r.number(c, "cx", where);
  calib.cy = r.number(c, "cy", where);
  const json& pose = r.at(c, "pose", where);
  const auto q = r.numbers(r.at(pose, "rotation_wxyz", where + "/pose"), 4, where + "/pose/rotation_wxyz");
  const auto t = r.numbers(r.at(pose, "translation", where + "/pose"), 3, where + "/pose/translation");
  calib.pose.rotation = {q[0], q[1], q[2], q[3]};
  calib.pose.translation = {t[0], t[1], t[2]};
  return calib;
}

inline Box3D box_from_json(const json& b, const detail::Reader& r, const std::string& where) {
  Box3D box;
  box.class_id = r.integer(b, "class_id", where);
  const auto c = r.numbers(r.at(b, "center", where), 3, where + "/center");
  const auto s = r.numbers(r.at(b, "size", where), 3, where + "/size");
  box.center = {c[0], c[1], c[2]};
  box.length = s[0];
  box.width = s[1];
  box.height = s[2];
  box.yaw = r.number(b, "yaw", where);
  box.score = r.number(b, "score", where);
  if (!(box.length > 0 && box.width > 0 && box.height > 0)) {
    r.fail(where + "/size", "dimensions must be positive");
  }
  return box;
}

/// Loads a scene document (and its referenced image) from `json_path`.
inline Scene load_scene(const fs::path& json_path) {
  std::ifstream is(json_path);
  if (!is) {
    throw SceneParseError(json_path.string(), "/", "cannot open file");
  }
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw SceneParseError(json_path.string(), "byte " + std::to_string(e.byte), e.what());
  }
  detail::Reader r(j, json_path.string());
  if (!j.is_object()) {
    r.fail("/", "expected an object");
  }
  if (!j.contains("format") || j["format"] != "cdsm-scene") {
    r.fail("/format", "expected \"cdsm-scene\"");
  }
  if (r.integer(j, "version", "") != 1) {
    r.fail("/version", "unsupported version");
  }
  Scene s;
  const json& id = r.at(j, "id", "");
  if (!id.is_string()) {
    r.fail("/id", "expected string");
  }
  s.id = id.get<std::string>();
  s.calib = calib_from_json(r.at(j, "calib", ""), r, "/calib");

  const json& img = r.at(j, "image", "");
  const json& file = r.at(img, "file", "/image");
  if (!file.is_string()) {
    r.fail("/image/file", "expected string");
  }
  s.image = load_ppm(json_path.parent_path() / file.get<std::string>());
  if (s.image.width != r.integer(img, "width", "/image") || s.image.height != r.integer(img, "height", "/image")) {
    r.fail("/image", "declared size does not match image file");
  }

  const json& radar = r.at(r.at(j, "radar", ""), "points", "/radar");
  if (!radar.is_array()) {
    r.fail("/radar/points", "expected array");
  }
  for (std::size_t i = 0; i < radar.size(); ++i) {
    const auto v = r.numbers(radar[i], 6, "/radar/points/" + std::to_string(i));
    s.radar.push_back({{v[0], v[1], v[2]}, v[3], v[4], v[5]});
  }
  if (j.contains("lidar")) {
    const json& lidar = r.at(j["lidar"], "points", "/lidar");
    if (!lidar.is_array()) {
      r.fail("/lidar/points", "expected array");
    }
    for (std::size_t i = 0; i < lidar.size(); ++i) {
      const auto v = r.numbers(lidar[i], 4, "/lidar/points/" + std::to_string(i));
      s.lidar.push_back({{v[0], v[1], v[2]}, v[3]});
    }
  }
  const json& labels = r.at(j, "labels", "");
  if (!labels.is_array()) {
    r.fail("/labels", "expected array");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string where = "/labels/" + std::to_string(i);
    Label l;
    l.box = box_from_json(labels[i], r, where);
    l.visibility = r.number(labels[i], "visibility", where);
    if (l.visibility < 0.0 || l.visibility > 1.0) {
      r.fail(where + "/visibility", "must lie in [0, 1]");
    }
    l.n_lidar_points = r.integer(labels[i], "n_lidar_points", where);
    l.n_radar_points = r.integer(labels[i], "n_radar_points", where);
    if (l.n_lidar_points < 0 || l.n_radar_points < 0) {
      r.fail(where, "point counts must be non-negative");
    }
    s.labels.push_back(l);
  }
  if (j.contains("metadata")) {
    s.metadata = j["metadata"];
  }
  return s;
}

/// Sorted scene documents of one split: `<root>/<split>/scene_*.json`.
inline std::vector<fs::path> list_scenes(const fs::path& root, const std::string& split) {
  std::vector<fs::path> out;
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) {
    return out;
  }
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.path().extension() == ".json" && name.rfind("scene_", 0) == 0) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<Scene> load_split(const fs::path& root, const std::string& split) {
  std::vector<Scene> out;
  for (const auto& p : list_scenes(root, split)) {
    out.push_back(load_scene(p));
  }
  return out;
}

/// Clips point clouds to the FOV and letterboxes the image to the network
/// input size, adjusting intrinsics to match.
inline Scene preprocess_scene(const Scene& in, const FovBox& fov, int target_w, int target_h) {
  Scene out = in;
  out.radar = clip_pointcloud(in.radar, fov);
  out.lidar = clip_pointcloud(in.lidar, fov);
  if (in.image.width != target_w || in.image.height != target_h) {
    auto lb = letterbox(in.image, target_w, target_h);
    for (double& v : lb.image.rgb) {
      v = std::round(v * 255.0) / 255.0;
    }
    out.image = std::move(lb.image);
    out.calib = lb.transform.apply(in.calib);
  }
  return out;
}

}  // namespace cdsm::data
