// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Anchor-based single-stage detection: anchors, box coding, target
// assignment, losses, a shared head, NMS and the detections file.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdsm/boxes.hpp"
#include "cdsm/geometry.hpp"
#include "cdsm/nn/layers.hpp"

namespace cdsm::det {

using nn::Var;

enum class Kind { Box2d, Box3d };

inline constexpr int kCode2d = 4;  // dx, dy, log w, log h
inline constexpr int kCode3d = 8;  // dx, dy, dz, log l, log w, log h, sin, cos

inline int code_size(Kind k) { return k == Kind::Box2d ? kCode2d : kCode3d; }

// ---------------------------------------------------------------------------
// Anchors

struct AnchorConfig {
  std::vector<double> scales = {1.0, std::pow(2.0, 1.0 / 3.0), std::pow(2.0, 2.0 / 3.0)};
  std::vector<double> ratios = {0.5, 1.0, 2.0};
  double base_per_stride = 4.0;  // 2D base side = 4 * stride pixels
  double base_3d = 3.0;          // 3D footprint base side, meters
  double z_center = 0.8;
  double height = 1.6;

  int per_cell() const { return static_cast<int>(scales.size() * ratios.size()); }
};

inline void to_json(nlohmann::json& j, const AnchorConfig& c) {
  j = {{"scales", c.scales}, {"ratios", c.ratios}, {"base_per_stride", c.base_per_stride},
       {"base_3d", c.base_3d}, {"z_center", c.z_center}, {"height", c.height}};
}
inline void from_json(const nlohmann::json& j, AnchorConfig& c) {
  AnchorConfig d;
  c.scales = j.value("scales", d.scales);
  c.ratios = j.value("ratios", d.ratios);
  c.base_per_stride = j.value("base_per_stride", d.base_per_stride);
  c.base_3d = j.value("base_3d", d.base_3d);
  c.z_center = j.value("z_center", d.z_center);
  c.height = j.value("height", d.height);
}

/// One feature level: rows x cols cells of side `stride`. For 2D levels the
/// unit is pixels and the origin is the image corner; for 3D levels rows
/// run along +X from x_min and columns along +Y from y_min, in meters.
struct LevelSpec {
  Index rows = 0;
  Index cols = 0;
  double stride = 1.0;
  double x0 = 0.0;  // 3D only: x_min of the grid
  double y0 = 0.0;  // 3D only: y_min of the grid
};

struct Anchor {
  // 2D: (cx, cy) pixel center and (w, h). 3D: center, (l, w, h), yaw.
  double x = 0.0, y = 0.0, z = 0.0;
  double l = 0.0, w = 0.0, h = 0.0;
  double yaw = 0.0;
};

/// Anchors of one level, indexed (a * rows + r) * cols + c, which is the
/// flattened layout of an (A, rows, cols) score map.
struct AnchorSet {
  Kind kind = Kind::Box2d;
  LevelSpec level;
  int per_cell = 9;
  std::vector<Anchor> anchors;

  std::size_t size() const { return anchors.size(); }
};

inline AnchorSet generate_anchors(const LevelSpec& level, Kind kind, const AnchorConfig& cfg = {}) {
  if (level.rows <= 0 || level.cols <= 0 || !(level.stride > 0)) {
    throw std::invalid_argument("generate_anchors: invalid level spec");
  }
  AnchorSet s{kind, level, cfg.per_cell(), {}};
  s.anchors.reserve(static_cast<std::size_t>(s.per_cell * level.rows * level.cols));
  for (double sc : cfg.scales) {
    for (double r : cfg.ratios) {
      for (Index i = 0; i < level.rows; ++i) {
        for (Index j = 0; j < level.cols; ++j) {
          Anchor a;
          if (kind == Kind::Box2d) {
            // Ratio is height / width; area is (base * scale)^2.
            const double side = cfg.base_per_stride * level.stride * sc;
            a.x = (static_cast<double>(j) + 0.5) * level.stride;
            a.y = (static_cast<double>(i) + 0.5) * level.stride;
            a.w = side / std::sqrt(r);
            a.h = side * std::sqrt(r);
          } else {
            // Ratio below one is the elongated footprint turned by 90 degrees.
            const double side = cfg.base_3d * sc;
            const double e = std::sqrt(std::max(r, 1.0 / r));
            a.x = level.x0 + (static_cast<double>(i) + 0.5) * level.stride;
            a.y = level.y0 + (static_cast<double>(j) + 0.5) * level.stride;
            a.z = cfg.z_center;
            a.l = side * e;
            a.w = side / e;
            a.h = cfg.height;
            a.yaw = r < 1.0 ? std::numbers::pi / 2 : 0.0;
          }
          s.anchors.push_back(a);
        }
      }
    }
  }
  return s;
}

inline Box2D anchor_box2d(const Anchor& a) { return {a.x - a.w / 2, a.y - a.h / 2, a.x + a.w / 2, a.y + a.h / 2}; }
inline Box3D anchor_box3d(const Anchor& a) { return {{a.x, a.y, a.z}, a.l, a.w, a.h, a.yaw}; }

// ---------------------------------------------------------------------------
// Box coding

namespace detail {

inline void require_anchor(const Anchor& a, Kind k) {
  const bool ok = a.w > 0 && (k == Kind::Box2d ? a.h > 0 : (a.l > 0 && a.h > 0));
  if (!ok) {
    throw std::invalid_argument("box coding: degenerate anchor");
  }
}

}  // namespace detail

inline std::array<double, kCode2d> encode2d(const Box2D& b, const Anchor& a) {
  detail::require_anchor(a, Kind::Box2d);
  if (!(b.width() > 0 && b.height() > 0)) {
    throw std::invalid_argument("encode2d: degenerate box");
  }
  const double cx = 0.5 * (b.u_min + b.u_max), cy = 0.5 * (b.v_min + b.v_max);
  return {(cx - a.x) / a.w, (cy - a.y) / a.h, std::log(b.width() / a.w), std::log(b.height() / a.h)};
}

inline Box2D decode2d(const double* d, const Anchor& a) {
  detail::require_anchor(a, Kind::Box2d);
  const double cx = a.x + d[0] * a.w, cy = a.y + d[1] * a.h;
  const double w = a.w * std::exp(d[2]), h = a.h * std::exp(d[3]);
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

inline std::array<double, kCode3d> encode3d(const Box3D& b, const Anchor& a) {
  detail::require_anchor(a, Kind::Box3d);
  if (!(b.length > 0 && b.width > 0 && b.height > 0)) {
    throw std::invalid_argument("encode3d: degenerate box");
  }
  const double diag = std::hypot(a.l, a.w);
  const double dyaw = b.yaw - a.yaw;
  return {(b.center.x - a.x) / diag, (b.center.y - a.y) / diag, (b.center.z - a.z) / a.h,
          std::log(b.length / a.l),  std::log(b.width / a.w),   std::log(b.height / a.h),
          std::sin(dyaw),            std::cos(dyaw)};
}

inline Box3D decode3d(const double* d, const Anchor& a) {
  detail::require_anchor(a, Kind::Box3d);
  const double diag = std::hypot(a.l, a.w);
  Box3D b;
  b.center = {a.x + d[0] * diag, a.y + d[1] * diag, a.z + d[2] * a.h};
  b.length = a.l * std::exp(d[3]);
  b.width = a.w * std::exp(d[4]);
  b.height = a.h * std::exp(d[5]);
  b.yaw = wrap_angle(a.yaw + std::atan2(d[6], d[7]));
  return b;
}

// ---------------------------------------------------------------------------
// Target assignment

struct AssignConfig {
  double pos_iou = 0.5;  // 2D
  double neg_iou = 0.4;  // 2D
  double pos_cells = 1.0;     // 3D: location positive within this many cells of a center
  double ignore_cells = 1.0;  // 3D: locations within this distance but not positive are ignored
};

/// Per-anchor training targets. label: 1 positive, 0 negative, -1 ignored.
struct Targets {
  std::vector<std::int8_t> label;
  std::vector<int> matched;  // ground-truth index for positives, -1 otherwise
  Tensor reg;                // [N, K], zero rows for non-positives
  int num_pos = 0;
};

inline Targets assign_targets_2d(const std::vector<Box2D>& gts, const AnchorSet& set, const AssignConfig& cfg = {}) {
  const std::size_t N = set.size();
  Targets t{std::vector<std::int8_t>(N, 0), std::vector<int>(N, -1), Tensor(Shape{static_cast<Index>(N), kCode2d}), 0};
  if (gts.empty()) {
    return t;
  }
  std::vector<double> best(N, 0.0);
  std::vector<int> arg(N, -1);
  std::vector<double> gt_best(gts.size(), 0.0);
  std::vector<std::size_t> gt_arg(gts.size(), 0);
  for (std::size_t n = 0; n < N; ++n) {
    const Box2D ab = anchor_box2d(set.anchors[n]);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double iou = iou2d(ab, gts[g]);
      if (iou > best[n]) {
        best[n] = iou;
        arg[n] = static_cast<int>(g);
      }
      if (iou > gt_best[g]) {
        gt_best[g] = iou;
        gt_arg[g] = n;
      }
    }
  }
  for (std::size_t n = 0; n < N; ++n) {
    if (best[n] >= cfg.pos_iou) {
      t.label[n] = 1;
      t.matched[n] = arg[n];
    } else if (best[n] >= cfg.neg_iou) {
      t.label[n] = -1;
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_best[g] > 0.0) {
      t.label[gt_arg[g]] = 1;
      t.matched[gt_arg[g]] = static_cast<int>(g);
    }
  }
  for (std::size_t n = 0; n < N; ++n) {
    if (t.label[n] == 1) {
      ++t.num_pos;
      const auto code = encode2d(gts[static_cast<std::size_t>(t.matched[n])], set.anchors[n]);
      std::copy(code.begin(), code.end(), &t.reg[static_cast<Index>(n) * kCode2d]);
    }
  }
  return t;
}

/// A cell location is positive for the nearest ground-truth center closer
/// than `pos_cells` cells; at that location only the anchor shape with the
/// best center-aligned BEV IoU is positive and the other shapes are
/// negative. Locations closer than `ignore_cells` that are not positive are
/// ignored; all remaining anchors are negative.
inline Targets assign_targets_3d(const std::vector<Box3D>& gts, const AnchorSet& set, const AssignConfig& cfg = {}) {
  const std::size_t N = set.size();
  Targets t{std::vector<std::int8_t>(N, 0), std::vector<int>(N, -1), Tensor(Shape{static_cast<Index>(N), kCode3d}), 0};
  if (gts.empty()) {
    return t;
  }
  const Index cells = set.level.rows * set.level.cols;
  const double pos_r = cfg.pos_cells * set.level.stride, ign_r = cfg.ignore_cells * set.level.stride;
  for (Index loc = 0; loc < cells; ++loc) {
    const Anchor& a0 = set.anchors[static_cast<std::size_t>(loc)];
    int g_best = -1;
    double d_best = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double d = std::hypot(gts[g].center.x - a0.x, gts[g].center.y - a0.y);
      if (d < d_best) {
        d_best = d;
        g_best = static_cast<int>(g);
      }
    }
    if (d_best >= ign_r) {
      continue;
    }
    if (d_best >= pos_r) {
      for (int a = 0; a < set.per_cell; ++a) {
        t.label[static_cast<std::size_t>(a * cells + loc)] = -1;
      }
      continue;
    }
    const Box3D& gt = gts[static_cast<std::size_t>(g_best)];
    int shape_best = 0;
    double iou_best = -1.0;
    for (int a = 0; a < set.per_cell; ++a) {
      Box3D ab = anchor_box3d(set.anchors[static_cast<std::size_t>(a * cells + loc)]);
      ab.center = gt.center;
      const double iou = bev_iou(ab, gt);
      if (iou > iou_best) {
        iou_best = iou;
        shape_best = a;
      }
    }
    for (int a = 0; a < set.per_cell; ++a) {
      const std::size_t n = static_cast<std::size_t>(a * cells + loc);
      if (a == shape_best) {
        t.label[n] = 1;
        t.matched[n] = g_best;
        ++t.num_pos;
        const auto code = encode3d(gt, set.anchors[n]);
        std::copy(code.begin(), code.end(), &t.reg[static_cast<Index>(n) * kCode3d]);
      } else {
        t.label[n] = 0;
      }
    }
  }
  return t;
}

/// Concatenates per-level targets in level order.
inline Targets concat_targets(const std::vector<Targets>& parts, int K) {
  Targets t;
  Index rows = 0;
  for (const Targets& p : parts) {
    rows += static_cast<Index>(p.label.size());
  }
  t.reg = Tensor(Shape{rows, K});
  Index off = 0;
  for (const Targets& p : parts) {
    t.label.insert(t.label.end(), p.label.begin(), p.label.end());
    t.matched.insert(t.matched.end(), p.matched.begin(), p.matched.end());
    std::copy(p.reg.values().begin(), p.reg.values().end(), &t.reg[off * K]);
    off += static_cast<Index>(p.label.size());
    t.num_pos += p.num_pos;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Losses

struct FocalParams {
  double alpha = 0.25;
  double gamma = 1.5;
  double eps = 1e-6;
};

/// Sum over non-ignored anchors of
///   -alpha (1-p)^gamma ln p           (positives)
///   -(1-alpha) p^gamma ln(1-p)        (negatives)
/// divided by `normalizer`. Probabilities are clamped to [eps, 1-eps];
/// clamped entries pass no gradient.
inline Var focal_loss(const Var& probs, const std::vector<std::int8_t>& labels, double normalizer,
                      const FocalParams& fp = {}) {
  if (static_cast<std::size_t>(probs.value().size()) != labels.size()) {
    throw std::invalid_argument("focal_loss: " + std::to_string(probs.value().size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
  }
  const double a = fp.alpha, g = fp.gamma, e = fp.eps;
  const Tensor& p = probs.value();
  auto dp = std::make_shared<Tensor>(p.shape());
  double loss = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0) {
      continue;
    }
    const double q = std::clamp(p[i], e, 1.0 - e);
    const bool live = p[i] > e && p[i] < 1.0 - e;
    if (y == 1) {
      loss += -a * std::pow(1.0 - q, g) * std::log(q);
      if (live) {
        (*dp)[i] = a * (g * std::pow(1.0 - q, g - 1.0) * std::log(q) - std::pow(1.0 - q, g) / q);
      }
    } else {
      loss += -(1.0 - a) * std::pow(q, g) * std::log(1.0 - q);
      if (live) {
        (*dp)[i] = -(1.0 - a) * (g * std::pow(q, g - 1.0) * std::log(1.0 - q) - std::pow(q, g) / (1.0 - q));
      }
    }
  }
  const double inv = 1.0 / normalizer;
  auto px = probs.shared();
  return nn::make_op(Tensor(Shape{}, loss * inv), {probs}, [px, dp, inv](nn::Node& self) {
    Tensor& gx = px->grad_buffer();
    const double s = self.grad[0] * inv;
    for (Index i = 0; i < gx.size(); ++i) {
      gx[i] += s * (*dp)[i];
    }
  });
}

/// sum_{n positive} sum_k w_k (pred[n,k] - target[n,k])^2 / normalizer.
/// With no positives the loss is zero.
inline Var weighted_mse(const Var& pred, const Tensor& target, const std::vector<std::int8_t>& labels,
                        const std::vector<double>& weights, double normalizer) {
  if (pred.value().shape() != target.shape() || pred.value().rank() != 2) {
    throw std::invalid_argument("weighted_mse: shape mismatch " + shape_str(pred.value().shape()) + " vs " +
                                shape_str(target.shape()));
  }
  const Index N = target.dim(0), K = target.dim(1);
  if (static_cast<Index>(labels.size()) != N || static_cast<Index>(weights.size()) != K) {
    throw std::invalid_argument("weighted_mse: mask or weight size mismatch");
  }
  const Tensor& x = pred.value();
  auto diff = std::make_shared<Tensor>(target.shape());
  double loss = 0.0;
  for (Index n = 0; n < N; ++n) {
    if (labels[static_cast<std::size_t>(n)] != 1) {
      continue;
    }
    for (Index k = 0; k < K; ++k) {
      const double d = x[n * K + k] - target[n * K + k];
      loss += weights[static_cast<std::size_t>(k)] * d * d;
      (*diff)[n * K + k] = 2.0 * weights[static_cast<std::size_t>(k)] * d;
    }
  }
  const double inv = 1.0 / normalizer;
  auto px = pred.shared();
  return nn::make_op(Tensor(Shape{}, loss * inv), {pred}, [px, diff, inv](nn::Node& self) {
    Tensor& gx = px->grad_buffer();
    const double s = self.grad[0] * inv;
    for (Index i = 0; i < gx.size(); ++i) {
      gx[i] += s * (*diff)[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Head

/// Shared across levels: a conv tower, then per-anchor class logits
/// (A channels) and box codes (A * K channels, anchor-major).
struct DetectionHead {
  std::vector<nn::ConvBlock> tower;
  nn::Conv2d cls;
  nn::Conv2d reg;
  int anchors = 9;
  int code = kCode2d;

  static DetectionHead create(nn::ParamStore& store, const std::string& name, int channels, int anchors, Kind kind,
                              int depth, std::uint64_t seed, double prior = 0.01) {
    DetectionHead h;
    h.anchors = anchors;
    h.code = code_size(kind);
    for (int i = 0; i < depth; ++i) {
      h.tower.push_back(nn::ConvBlock::create(store, name + ".t" + std::to_string(i), channels, channels, 3, 1,
                                              nn::Activation::LeakyRelu, seed));
    }
    h.cls = nn::Conv2d::create(store, name + ".cls", channels, anchors, 3, 1, seed);
    h.reg = nn::Conv2d::create(store, name + ".reg", channels, anchors * h.code, 3, 1, seed);
    store.get(h.cls.bias).value.fill(-std::log((1.0 - prior) / prior));
    for (double& v : store.get(h.reg.weight).value.values()) {
      v *= 0.1;
    }
    return h;
  }

  struct Output {
    Var probs;  // [N] over all levels, level-major then anchor index
    Var codes;  // [N, K]
  };

  Output operator()(nn::Binding& bind, const nn::LevelSet& levels) const {
    std::vector<Var> ps, cs;
    for (const Var& x0 : levels.maps) {
      Var x = x0;
      for (const auto& b : tower) {
        x = b(bind, x);
      }
      const Index H = x.dim(1), W = x.dim(2), A = anchors, K = code;
      ps.push_back(nn::reshape(nn::sigmoid(cls(bind, x)), {A * H * W}));
      // (A*K, H, W) -> [A*H*W, K]
      auto src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(A * K * H * W));
      for (Index a = 0; a < A; ++a) {
        for (Index p = 0; p < H * W; ++p) {
          for (Index k = 0; k < K; ++k) {
            (*src)[static_cast<std::size_t>(((a * H * W + p) * K) + k)] = (a * K + k) * H * W + p;
          }
        }
      }
      cs.push_back(nn::gather(reg(bind, x), std::move(src), {A * H * W, K}));
    }
    return {nn::concat(ps), nn::concat(cs)};
  }
};

// ---------------------------------------------------------------------------
// Suppression and decoding

/// Greedy suppression in descending score order (ties keep input order):
/// a box is dropped when its IoU with an already kept box exceeds `thr`.
template <typename Box, typename IoU>
std::vector<Box> nms(const std::vector<Box>& boxes, double thr, IoU iou, std::size_t max_keep = 0) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<Box> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (const Box& k : kept) {
      if (iou(k, boxes[i]) > thr) {
        keep = false;
        break;
      }
    }
    if (keep) {
      kept.push_back(boxes[i]);
      if (max_keep > 0 && kept.size() >= max_keep) {
        break;
      }
    }
  }
  return kept;
}

inline std::vector<Box2D> nms_2d(const std::vector<Box2D>& boxes, double thr, std::size_t max_keep = 0) {
  return nms(boxes, thr, [](const Box2D& a, const Box2D& b) { return iou2d(a, b); }, max_keep);
}

inline std::vector<Box3D> nms_bev(const std::vector<Box3D>& boxes, double thr, std::size_t max_keep = 0) {
  return nms(boxes, thr, [](const Box3D& a, const Box3D& b) { return bev_iou(a, b); }, max_keep);
}

struct InferenceConfig {
  double score_threshold = 0.05;
  double nms_iou_2d = 0.5;
  double nms_iou_bev = 0.3;
  std::size_t max_detections = 100;
  std::size_t pre_nms_top_k = 1000;
};

inline void to_json(nlohmann::json& j, const InferenceConfig& c) {
  j = {{"score_threshold", c.score_threshold}, {"nms_iou_2d", c.nms_iou_2d}, {"nms_iou_bev", c.nms_iou_bev},
       {"max_detections", c.max_detections},   {"pre_nms_top_k", c.pre_nms_top_k}};
}
inline void from_json(const nlohmann::json& j, InferenceConfig& c) {
  InferenceConfig d;
  c.score_threshold = j.value("score_threshold", d.score_threshold);
  c.nms_iou_2d = j.value("nms_iou_2d", d.nms_iou_2d);
  c.nms_iou_bev = j.value("nms_iou_bev", d.nms_iou_bev);
  c.max_detections = j.value("max_detections", d.max_detections);
  c.pre_nms_top_k = j.value("pre_nms_top_k", d.pre_nms_top_k);
}

namespace detail {

// Indices of anchors above the score threshold, best first, at most k.
inline std::vector<std::size_t> candidates(const Tensor& probs, const InferenceConfig& cfg) {
  std::vector<std::size_t> idx;
  for (Index i = 0; i < probs.size(); ++i) {
    if (probs[i] >= cfg.score_threshold) {
      idx.push_back(static_cast<std::size_t>(i));
    }
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return probs[static_cast<Index>(a)] > probs[static_cast<Index>(b)];
  });
  if (cfg.pre_nms_top_k > 0 && idx.size() > cfg.pre_nms_top_k) {
    idx.resize(cfg.pre_nms_top_k);
  }
  return idx;
}

}  // namespace detail

/// Decodes pooled head output over all levels and suppresses once.
inline std::vector<Box2D> decode_detections_2d(const Tensor& probs, const Tensor& codes,
                                               const std::vector<Anchor>& anchors, const InferenceConfig& cfg = {},
                                               int class_id = 0) {
  std::vector<Box2D> boxes;
  for (std::size_t i : detail::candidates(probs, cfg)) {
    Box2D b = decode2d(codes.values().data() + i * kCode2d, anchors[i]);
    b.score = probs[static_cast<Index>(i)];
    b.class_id = class_id;
    boxes.push_back(b);
  }
  return nms_2d(boxes, cfg.nms_iou_2d, cfg.max_detections);
}

inline std::vector<Box3D> decode_detections_3d(const Tensor& probs, const Tensor& codes,
                                               const std::vector<Anchor>& anchors, const InferenceConfig& cfg = {},
                                               int class_id = 0) {
  std::vector<Box3D> boxes;
  for (std::size_t i : detail::candidates(probs, cfg)) {
    Box3D b = decode3d(codes.values().data() + i * kCode3d, anchors[i]);
    b.score = probs[static_cast<Index>(i)];
    b.class_id = class_id;
    boxes.push_back(b);
  }
  return nms_bev(boxes, cfg.nms_iou_bev, cfg.max_detections);
}

/// All anchors of several levels in level order.
inline std::vector<Anchor> pooled_anchors(const std::vector<AnchorSet>& sets) {
  std::vector<Anchor> out;
  for (const AnchorSet& s : sets) {
    out.insert(out.end(), s.anchors.begin(), s.anchors.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detections file
//
// {"format": "cdsm-detections", "version": 1, "scene": id, "kind": "2d"|"3d",
//  "detections": [{"class_id", "score", "box": [u_min, v_min, u_max, v_max]}]
//              or [{"class_id", "score", "center": [x,y,z], "size": [l,w,h], "yaw"}]}

struct SceneDetections {
  std::string scene;
  Kind kind = Kind::Box3d;
  std::vector<Box2D> boxes2d;
  std::vector<Box3D> boxes3d;
};

inline nlohmann::json to_json(const SceneDetections& d) {
  nlohmann::json j{{"format", "cdsm-detections"}, {"version", 1}, {"scene", d.scene},
                   {"kind", d.kind == Kind::Box2d ? "2d" : "3d"}};
  auto& arr = j["detections"] = nlohmann::json::array();
  if (d.kind == Kind::Box2d) {
    for (const Box2D& b : d.boxes2d) {
      arr.push_back({{"class_id", b.class_id}, {"score", b.score}, {"box", {b.u_min, b.v_min, b.u_max, b.v_max}}});
    }
  } else {
    for (const Box3D& b : d.boxes3d) {
      arr.push_back({{"class_id", b.class_id},
                     {"score", b.score},
                     {"center", {b.center.x, b.center.y, b.center.z}},
                     {"size", {b.length, b.width, b.height}},
                     {"yaw", b.yaw}});
    }
  }
  return j;
}

inline SceneDetections detections_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cdsm-detections") {
    throw std::runtime_error("not a detections file");
  }
  if (j.value("version", 0) != 1) {
    throw std::runtime_error("unsupported detections version");
  }
  SceneDetections d;
  d.scene = j.at("scene").get<std::string>();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "2d" && kind != "3d") {
    throw std::runtime_error("detections: unknown kind '" + kind + "'");
  }
  d.kind = kind == "2d" ? Kind::Box2d : Kind::Box3d;
  for (const auto& e : j.at("detections")) {
    if (d.kind == Kind::Box2d) {
      const auto b = e.at("box").get<std::vector<double>>();
      if (b.size() != 4) {
        throw std::runtime_error("detections: box needs 4 values");
      }
      d.boxes2d.push_back({b[0], b[1], b[2], b[3], e.at("class_id").get<int>(), e.at("score").get<double>()});
    } else {
      const auto c = e.at("center").get<std::vector<double>>();
      const auto s = e.at("size").get<std::vector<double>>();
      if (c.size() != 3 || s.size() != 3) {
        throw std::runtime_error("detections: center and size need 3 values");
      }
      d.boxes3d.push_back({{c[0], c[1], c[2]}, s[0], s[1], s[2], e.at("yaw").get<double>(),
                           e.at("class_id").get<int>(), e.at("score").get<double>()});
    }
  }
  return d;
}

inline void save_detections(const SceneDetections& d, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) {
    throw std::runtime_error("cannot write " + path.string());
  }
  os << to_json(d).dump(1) << '\n';
}

inline SceneDetections load_detections(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw std::runtime_error("cannot open " + path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  return detections_from_json(j);
}

}  // namespace cdsm::det
