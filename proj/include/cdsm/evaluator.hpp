// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Detection evaluation: greedy score-ordered association by IoU or center
// distance, 101-point interpolated average precision, and the mean over the
// four distance thresholds.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdsm/boxes.hpp"

namespace cdsm::eval {

enum class AssocKind { Iou2d, Dist3d };

struct AssociationSpec {
  AssocKind kind = AssocKind::Dist3d;
  double threshold = 2.0;  // IoU fraction or meters
  bool planar = true;      // Dist3d: ignore z

  void validate() const {
    if (kind == AssocKind::Iou2d && !(threshold > 0.0 && threshold < 1.0)) {
      throw std::invalid_argument("AssociationSpec: IoU threshold must lie in (0, 1)");
    }
    if (kind == AssocKind::Dist3d && !(threshold > 0.0)) {
      throw std::invalid_argument("AssociationSpec: distance threshold must be positive");
    }
  }

  std::string name() const {
    std::ostringstream os;
    if (kind == AssocKind::Iou2d) {
      os << "IOU" << std::lround(threshold * 100);
    } else {
      os << "DIST" << threshold;
    }
    return os.str();
  }
};

inline AssociationSpec iou20() { return {AssocKind::Iou2d, 0.2}; }
inline AssociationSpec dist(double meters, bool planar = true) { return {AssocKind::Dist3d, meters, planar}; }
inline const std::vector<double>& nuscenes_thresholds() {
  static const std::vector<double> t{0.5, 1.0, 2.0, 4.0};
  return t;
}

inline double center_distance(const Box3D& a, const Box3D& b, bool planar) {
  const double dz = planar ? 0.0 : a.center.z - b.center.z;
  return std::sqrt((a.center.x - b.center.x) * (a.center.x - b.center.x) +
                   (a.center.y - b.center.y) * (a.center.y - b.center.y) + dz * dz);
}

/// Outcome for one scene. pred_label[i] is the label matched to
/// prediction i or -1; label_pred is the reverse map.
struct SceneMatch {
  std::vector<int> pred_label;
  std::vector<int> label_pred;
  std::vector<double> pred_metric;  // IoU or distance of the match, NaN if unmatched
};

namespace detail {

template <typename Box, typename Metric>
SceneMatch greedy(const std::vector<Box>& preds, const std::vector<Box>& labels, Metric metric, bool higher_better,
                  double threshold) {
  SceneMatch m{std::vector<int>(preds.size(), -1), std::vector<int>(labels.size(), -1),
               std::vector<double>(preds.size(), std::numeric_limits<double>::quiet_NaN())};
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  for (std::size_t p : order) {
    int best = -1;
    double best_v = 0.0;
    for (std::size_t l = 0; l < labels.size(); ++l) {
      if (m.label_pred[l] >= 0) {
        continue;
      }
      const double v = metric(preds[p], labels[l]);
      const bool ok = higher_better ? v >= threshold : v <= threshold;
      if (ok && (best < 0 || (higher_better ? v > best_v : v < best_v))) {
        best = static_cast<int>(l);
        best_v = v;
      }
    }
    if (best >= 0) {
      m.pred_label[p] = best;
      m.label_pred[static_cast<std::size_t>(best)] = static_cast<int>(p);
      m.pred_metric[p] = best_v;
    }
  }
  return m;
}

}  // namespace detail

/// Each prediction, highest score first, takes the best still unmatched
/// label that passes the threshold.
inline SceneMatch associate(const std::vector<Box3D>& preds, const std::vector<Box3D>& labels,
                            const AssociationSpec& spec) {
  spec.validate();
  if (spec.kind != AssocKind::Dist3d) {
    throw std::invalid_argument("associate: 3D boxes need a distance spec");
  }
  return detail::greedy(
      preds, labels, [&](const Box3D& a, const Box3D& b) { return center_distance(a, b, spec.planar); }, false,
      spec.threshold);
}

inline SceneMatch associate(const std::vector<Box2D>& preds, const std::vector<Box2D>& labels,
                            const AssociationSpec& spec) {
  spec.validate();
  if (spec.kind != AssocKind::Iou2d) {
    throw std::invalid_argument("associate: 2D boxes need an IoU spec");
  }
  return detail::greedy(preds, labels, [](const Box2D& a, const Box2D& b) { return iou2d(a, b); }, true,
                        spec.threshold);
}

struct ScoredMatch {
  double score = 0.0;
  bool tp = false;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct ApResult {
  double ap = 0.0;
  bool undefined = false;  // no labels
  int tp = 0;
  int fp = 0;
  int fn = 0;
  int labels = 0;
  std::vector<PrPoint> curve;
};

/// Area under the precision envelope sampled at recall 0, 0.01, ..., 1.
inline ApResult average_precision(std::vector<ScoredMatch> dets, int num_labels) {
  ApResult r;
  r.labels = num_labels;
  std::stable_sort(dets.begin(), dets.end(), [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  for (const ScoredMatch& d : dets) {
    (d.tp ? r.tp : r.fp) += 1;
    if (num_labels > 0) {
      r.curve.push_back({static_cast<double>(r.tp) / num_labels, static_cast<double>(r.tp) / (r.tp + r.fp)});
    }
  }
  r.fn = num_labels - r.tp;
  if (num_labels <= 0) {
    r.undefined = true;
    r.ap = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  // envelope[i] = max precision over points i..end
  std::vector<double> env(r.curve.size());
  double run = 0.0;
  for (std::size_t i = r.curve.size(); i-- > 0;) {
    run = std::max(run, r.curve[i].precision);
    env[i] = run;
  }
  double sum = 0.0;
  std::size_t j = 0;
  for (int k = 0; k <= 100; ++k) {
    const double level = k / 100.0;
    while (j < r.curve.size() && r.curve[j].recall < level - 1e-12) {
      ++j;
    }
    if (j < r.curve.size()) {
      sum += env[j];
    }
  }
  r.ap = sum / 101.0;
  return r;
}

struct MatchedPair {
  std::size_t scene = 0;
  int pred = -1;
  int label = -1;
  double metric = 0.0;
};

struct ThresholdResult {
  AssociationSpec spec;
  ApResult ap;
  std::vector<MatchedPair> pairs;
};

struct EvalReport {
  std::vector<ThresholdResult> results;
  double map = 0.0;
  bool undefined = false;
  std::size_t scenes = 0;

  const ThresholdResult& at(const std::string& name) const {
    for (const auto& r : results) {
      if (r.spec.name() == name) {
        return r;
      }
    }
    throw std::out_of_range("EvalReport: no result for " + name);
  }
};

template <typename Box>
ThresholdResult evaluate_at(const std::vector<std::vector<Box>>& preds, const std::vector<std::vector<Box>>& labels,
                            const AssociationSpec& spec) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("evaluate: " + std::to_string(preds.size()) + " prediction sets for " +
                                std::to_string(labels.size()) + " scenes");
  }
  ThresholdResult out{spec, {}, {}};
  std::vector<ScoredMatch> dets;
  int n_labels = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const SceneMatch m = associate(preds[s], labels[s], spec);
    n_labels += static_cast<int>(labels[s].size());
    for (std::size_t p = 0; p < preds[s].size(); ++p) {
      dets.push_back({preds[s][p].score, m.pred_label[p] >= 0});
      if (m.pred_label[p] >= 0) {
        out.pairs.push_back({s, static_cast<int>(p), m.pred_label[p], m.pred_metric[p]});
      }
    }
  }
  out.ap = average_precision(std::move(dets), n_labels);
  return out;
}

/// AP at each distance threshold and their arithmetic mean.
inline EvalReport evaluate_3d(const std::vector<std::vector<Box3D>>& preds, const std::vector<std::vector<Box3D>>& labels,
                              const std::vector<double>& thresholds = nuscenes_thresholds(), bool planar = true) {
  EvalReport r;
  r.scenes = preds.size();
  double sum = 0.0;
  for (double t : thresholds) {
    r.results.push_back(evaluate_at(preds, labels, dist(t, planar)));
    sum += r.results.back().ap.ap;
    r.undefined = r.undefined || r.results.back().ap.undefined;
  }
  r.map = thresholds.empty() ? 0.0 : sum / static_cast<double>(thresholds.size());
  return r;
}

inline EvalReport evaluate_2d(const std::vector<std::vector<Box2D>>& preds, const std::vector<std::vector<Box2D>>& labels,
                              double iou = 0.2) {
  EvalReport r;
  r.scenes = preds.size();
  r.results.push_back(evaluate_at(preds, labels, AssociationSpec{AssocKind::Iou2d, iou}));
  r.map = r.results.back().ap.ap;
  r.undefined = r.results.back().ap.undefined;
  return r;
}

inline double nuscenes_map(const std::vector<std::vector<Box3D>>& preds, const std::vector<std::vector<Box3D>>& labels) {
  return evaluate_3d(preds, labels).map;
}

inline nlohmann::json to_json(const EvalReport& r, bool with_pairs = false) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"scenes", r.scenes}, {"map", num(r.map)}, {"undefined", r.undefined}};
  auto& res = j["results"] = nlohmann::json::array();
  for (const auto& t : r.results) {
    nlohmann::json e{{"name", t.spec.name()},
                     {"threshold", t.spec.threshold},
                     {"ap", num(t.ap.ap)},
                     {"undefined", t.ap.undefined},
                     {"tp", t.ap.tp},
                     {"fp", t.ap.fp},
                     {"fn", t.ap.fn},
                     {"labels", t.ap.labels}};
    if (with_pairs) {
      auto& pairs = e["pairs"] = nlohmann::json::array();
      for (const auto& p : t.pairs) {
        pairs.push_back({p.scene, p.pred, p.label, p.metric});
      }
    }
    res.push_back(std::move(e));
  }
  return j;
}

/// Precision-recall curves as a standalone SVG line plot.
inline std::string pr_curve_svg(const EvalReport& r, int size = 400) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  const int m = 40, w = size - 2 * m;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<rect x=\"" << m << "\" y=\"" << m << "\" width=\"" << w << "\" height=\"" << w
     << "\" fill=\"none\" stroke=\"black\"/>\n"
     << "<text x=\"" << size / 2 << "\" y=\"" << size - 8 << "\" text-anchor=\"middle\" font-size=\"12\">recall</text>\n"
     << "<text x=\"12\" y=\"" << size / 2 << "\" font-size=\"12\" transform=\"rotate(-90 12 " << size / 2
     << ")\" text-anchor=\"middle\">precision</text>\n";
  for (std::size_t i = 0; i < r.results.size(); ++i) {
    const auto& t = r.results[i];
    const char* c = colors[i % 6];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    os << m << "," << m << " ";
    for (const PrPoint& p : t.ap.curve) {
      os << m + p.recall * w << "," << m + (1.0 - p.precision) * w << " ";
    }
    os << "\"/>\n";
    os << "<text x=\"" << size - m - 4 << "\" y=\"" << m + 16 + 14 * static_cast<int>(i)
       << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << c << "\">" << t.spec.name() << " AP "
       << (std::isfinite(t.ap.ap) ? std::to_string(t.ap.ap).substr(0, 5) : std::string("n/a")) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace cdsm::eval
