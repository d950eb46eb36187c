// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cdsm/evaluator.hpp"
#include "cdsm/model.hpp"
#include "cdsm/nn/checkpoint.hpp"

namespace cdsm::train {

using model::Model;
using model::Regime;
using model::Sample;

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

inline AdamState adam_init(const nn::ParamStore& params) {
  return {nn::zero_grads(params), nn::zero_grads(params), 0};
}

/// One bias-corrected Adam update of every parameter with `update[i]` set
/// (all when empty). Gradients are checked before anything is modified.
inline void adam_step(nn::ParamStore& params, const nn::GradStore& grads, AdamState& st, double lr,
                      const AdamConfig& cfg = {}, const std::vector<bool>& update = {}) {
  if (grads.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  }
  auto active = [&](std::size_t i) { return update.empty() || update[i]; };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!active(i)) {
      continue;
    }
    for (double g : grads[i].values()) {
      if (!std::isfinite(g)) {
        throw NonFiniteGradient(params[i].name);
      }
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!active(i)) {
      continue;
    }
    Tensor& p = params[i].value;
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    const Tensor& g = grads[i];
    for (Index k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

/// floor + (lr0 - floor) (1 + cos(pi step / total)) / 2
inline double cosine_lr(long step, long total, double lr0, double floor) {
  if (total <= 0) {
    throw std::invalid_argument("cosine_lr: total must be positive");
  }
  if (step < 0 || step > total) {
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) +
                                "]");
  }
  return floor + (lr0 - floor) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total)) / 2.0;
}

/// Stops at the first epoch where the best loss so far is `patience`
/// epochs old. Only strict improvements reset the count.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {
    if (patience < 1) {
      throw std::invalid_argument("EarlyStopping: patience must be >= 1");
    }
  }

  /// Returns true when training should stop after this epoch.
  bool update(int epoch, double loss) {
    if (loss < best_) {
      best_ = loss;
      best_epoch_ = epoch;
      improved_ = true;
    } else {
      improved_ = false;
    }
    return epoch - best_epoch_ >= patience_;
  }

  bool improved() const { return improved_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  bool improved_ = false;
};

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  Regime regime = Regime::Cam3d;
  double lr = 3e-5;
  double lr_floor_ratio = 0.01;
  int epochs = 50;
  int patience = 5;
  bool early_stopping = true;
  int batch_size = 4;
  std::uint64_t seed = 0;
  int threads = 1;
  det::FocalParams focal;
  AdamConfig adam;

  void validate() const {
    if (!(lr > 0.0)) {
      throw std::invalid_argument("train: lr must be > 0");
    }
    if (patience < 1) {
      throw std::invalid_argument("train: patience must be >= 1");
    }
    if (epochs < 1 || batch_size < 1 || threads < 1) {
      throw std::invalid_argument("train: epochs, batch_size and threads must be >= 1");
    }
    if (!(lr_floor_ratio >= 0.0 && lr_floor_ratio <= 1.0)) {
      throw std::invalid_argument("train: lr_floor_ratio must be in [0, 1]");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"regime", model::to_string(c.regime)},
       {"lr", c.lr},
       {"lr_floor_ratio", c.lr_floor_ratio},
       {"epochs", c.epochs},
       {"patience", c.patience},
       {"early_stopping", c.early_stopping},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"threads", c.threads},
       {"focal_alpha", c.focal.alpha},
       {"focal_gamma", c.focal.gamma}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.regime = model::regime_from_string(j.value("regime", model::to_string(d.regime)));
  c.lr = j.value("lr", d.lr);
  c.lr_floor_ratio = j.value("lr_floor_ratio", d.lr_floor_ratio);
  c.epochs = j.value("epochs", d.epochs);
  c.patience = j.value("patience", d.patience);
  c.early_stopping = j.value("early_stopping", d.early_stopping);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
  c.focal.alpha = j.value("focal_alpha", d.focal.alpha);
  c.focal.gamma = j.value("focal_gamma", d.focal.gamma);
}

// ---------------------------------------------------------------------------
// Pretrained weights

class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainedPaths {
  std::filesystem::path camera;  // cam3d checkpoint: camera.* and cdsm.*
  std::filesystem::path radar;   // radar3d checkpoint: radar.*
  std::filesystem::path frozen;  // fusion_frozen checkpoint
};

namespace detail {

inline nn::ParamStore read_required(const std::filesystem::path& p, const std::string& what) {
  if (p.empty()) {
    throw MissingCheckpoint(what + " checkpoint is required but was not given");
  }
  if (!std::filesystem::exists(p)) {
    throw MissingCheckpoint(what + " checkpoint not found: " + p.string());
  }
  return nn::load_checkpoint(p);
}

inline void load_prefix(Model& m, const nn::ParamStore& src, const std::string& prefix, const std::string& what) {
  if (m.params().load_matching(src, prefix) == 0) {
    throw MissingCheckpoint(what + " checkpoint has no '" + prefix + "' parameters");
  }
}

}  // namespace detail

/// Loads the weights a fusion regime starts from. Other regimes start
/// from their initializer and ignore `paths`.
inline void load_pretrained(Model& m, const PretrainedPaths& paths) {
  if (m.regime() == Regime::FusionFrozen) {
    const nn::ParamStore cam = detail::read_required(paths.camera, "camera");
    const nn::ParamStore rad = detail::read_required(paths.radar, "radar");
    detail::load_prefix(m, cam, "camera.", "camera");
    detail::load_prefix(m, cam, "cdsm.", "camera");
    detail::load_prefix(m, rad, "radar.", "radar");
  } else if (m.regime() == Regime::FusionFinetune) {
    const nn::ParamStore fz = detail::read_required(paths.frozen, "fusion_frozen");
    if (m.params().load_matching(fz) != m.params().size()) {
      throw MissingCheckpoint("fusion_frozen checkpoint does not cover every fusion parameter");
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_cls = 0.0;
  double train_reg = 0.0;
  double val_loss = 0.0;
  bool improved = false;
};

inline void to_json(nlohmann::json& j, const EpochLog& e) {
  j = {{"epoch", e.epoch},         {"lr", e.lr},         {"train_loss", e.train_loss}, {"train_cls", e.train_cls},
       {"train_reg", e.train_reg}, {"val_loss", e.val_loss}, {"improved", e.improved}};
}

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val = 0.0;
  bool stopped_early = false;
};

namespace detail {

struct SampleGrad {
  nn::GradStore grads;
  double loss = 0.0, cls = 0.0, reg = 0.0;
};

inline SampleGrad sample_grad(const Model& m, const Sample& s, const det::FocalParams& fp,
                              const model::FrozenFeatures* frozen) {
  nn::Binding bind(m.params(), true, m.trainable());
  const model::LossValue l = m.loss(bind, s, fp, frozen);
  nn::backward(l.total);
  SampleGrad g{nn::zero_grads(m.params()), l.total.value()[0], l.cls, l.reg};
  bind.accumulate(g.grads);
  return g;
}

inline double eval_loss(const Model& m, const Sample& s, const det::FocalParams& fp,
                        const model::FrozenFeatures* frozen) {
  nn::Binding bind(m.params(), false);
  return m.loss(bind, s, fp, frozen).total.value()[0];
}

}  // namespace detail

/// Per-sample gradients of one batch, computed on up to `threads` threads
/// and summed in sample order so the result does not depend on threading.
inline std::vector<detail::SampleGrad> batch_grads(const Model& m, const std::vector<const Sample*>& batch,
                                                   const std::vector<const model::FrozenFeatures*>& frozen,
                                                   const det::FocalParams& fp, int threads) {
  std::vector<detail::SampleGrad> out(batch.size());
  auto work = [&](std::size_t i) { out[i] = detail::sample_grad(m, *batch[i], fp, frozen[i]); };
  if (threads <= 1 || batch.size() <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      work(i);
    }
    return out;
  }
  std::vector<std::exception_ptr> errors(batch.size());
  for (std::size_t start = 0; start < batch.size(); start += static_cast<std::size_t>(threads)) {
    std::vector<std::thread> pool;
    const std::size_t end = std::min(batch.size(), start + static_cast<std::size_t>(threads));
    for (std::size_t i = start; i < end; ++i) {
      pool.emplace_back([&, i] {
        try {
          work(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) {
      t.join();
    }
  }
  for (const auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
  return out;
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mini-batch Adam with a per-epoch cosine schedule. Validation loss drives
/// early stopping; the parameters of the best validation epoch are restored
/// at the end. An empty validation set falls back to the training loss.
inline TrainResult train(Model& m, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (cfg.regime != m.regime()) {
    throw std::invalid_argument("train: config regime " + model::to_string(cfg.regime) + " does not match model " +
                                model::to_string(m.regime()));
  }
  if (train_set.empty()) {
    throw std::invalid_argument("train: empty training set");
  }
  std::vector<bool> update(m.params().size());
  for (std::size_t i = 0; i < update.size(); ++i) {
    update[i] = m.is_trainable(m.params()[i].name);
  }
  const bool cache = m.regime() == Regime::FusionFrozen;
  std::vector<model::FrozenFeatures> train_frozen, val_frozen;
  if (cache) {
    for (const Sample& s : train_set) train_frozen.push_back(m.frozen_features(s));
    for (const Sample& s : val_set) val_frozen.push_back(m.frozen_features(s));
  }

  AdamState st = adam_init(m.params());
  EarlyStopping stopper(cfg.patience);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  nn::ParamStore best = m.params();
  TrainResult res;
  const double floor = cfg.lr * cfg.lr_floor_ratio;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog e;
    e.epoch = epoch;
    e.lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr, floor);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample*> batch;
      std::vector<const model::FrozenFeatures*> fz;
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(&train_set[order[k]]);
        fz.push_back(cache ? &train_frozen[order[k]] : nullptr);
      }
      const auto parts = batch_grads(m, batch, fz, cfg.focal, cfg.threads);
      nn::GradStore g = nn::zero_grads(m.params());
      const double inv = 1.0 / static_cast<double>(parts.size());
      for (const auto& p : parts) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          for (Index k = 0; k < g[i].size(); ++k) {
            g[i][k] += p.grads[i][k] * inv;
          }
        }
        e.train_loss += p.loss;
        e.train_cls += p.cls;
        e.train_reg += p.reg;
      }
      adam_step(m.params(), g, st, e.lr, cfg.adam, update);
    }
    const double n = static_cast<double>(train_set.size());
    e.train_loss /= n;
    e.train_cls /= n;
    e.train_reg /= n;
    if (val_set.empty()) {
      e.val_loss = e.train_loss;
    } else {
      for (std::size_t i = 0; i < val_set.size(); ++i) {
        e.val_loss += detail::eval_loss(m, val_set[i], cfg.focal, cache ? &val_frozen[i] : nullptr);
      }
      e.val_loss /= static_cast<double>(val_set.size());
    }
    const bool stop = stopper.update(epoch, e.val_loss);
    e.improved = stopper.improved();
    if (e.improved) {
      best = m.params();
    }
    res.log.push_back(e);
    if (on_epoch) {
      on_epoch(e);
    }
    if (cfg.early_stopping && stop) {
      res.stopped_early = true;
      break;
    }
  }
  m.params() = best;
  res.best_epoch = stopper.best_epoch();
  res.best_val = stopper.best();
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<det::SceneDetections> infer(const Model& m, const std::vector<Sample>& samples,
                                               const det::InferenceConfig& ic = {}) {
  std::vector<det::SceneDetections> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) {
    out.push_back(m.detect(s, ic));
  }
  return out;
}

/// 3D regimes: center-distance thresholds against the union label set.
/// 2D regime: IoU 0.2 against the camera-visible label boxes.
inline eval::EvalReport evaluate(const Model& m, const std::vector<Sample>& samples,
                                 const std::vector<det::SceneDetections>& dets) {
  if (samples.size() != dets.size()) {
    throw std::invalid_argument("evaluate: sample and detection counts differ");
  }
  if (m.kind() == det::Kind::Box2d) {
    std::vector<std::vector<Box2D>> p, l;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      p.push_back(dets[i].boxes2d);
      l.push_back(samples[i].boxes2d);
    }
    return eval::evaluate_2d(p, l);
  }
  std::vector<std::vector<Box3D>> p, l;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    p.push_back(dets[i].boxes3d);
    l.push_back(samples[i].eval3d);
  }
  return eval::evaluate_3d(p, l);
}

inline std::vector<Sample> prepare_all(const Model& m, const std::vector<data::Scene>& scenes) {
  std::vector<Sample> out;
  out.reserve(scenes.size());
  for (const data::Scene& s : scenes) {
    out.push_back(m.prepare(s));
  }
  return out;
}

}  // namespace cdsm::train
