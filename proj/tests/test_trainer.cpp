// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <set>

#include "cdsm/experiment.hpp"
#include "cdsm/train.hpp"

using namespace cdsm;
using namespace cdsm::train;
using model::Model;
using model::Regime;

namespace {

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.image_width = 256;
  c.image_height = 128;
  c.cell = 4.0;
  c.camera_channels = 4;
  c.cdsm.channels = 4;
  c.radar_features = 4;
  c.radar_channels = 4;
  return c;
}

data::SynthConfig tiny_synth() {
  data::SynthConfig s;
  s.image_width = 256;
  s.image_height = 128;
  s.fx = 200;
  s.fy = 200;
  return s;
}

std::vector<data::Scene> scenes(int n, std::uint64_t base) {
  std::vector<data::Scene> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(data::generate_synthetic_scene(base + i, tiny_synth(), "scene_" + std::to_string(i)));
  }
  return out;
}

nn::ParamStore three_params() {
  nn::ParamStore s;
  s.add("a", Tensor(Shape{2}, 0.5));
  s.add("b", Tensor(Shape{1}, -1.0));
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cdsm_trainer_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

bool equal_values(const Tensor& x, const Tensor& y) {
  const auto a = x.values(), b = y.values();
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

bool same_values(const nn::ParamStore& x, const nn::ParamStore& y, const std::string& prefix) {
  for (const nn::Param& p : x) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    if (!equal_values(p.value, y.get(p.name).value)) return false;
  }
  return true;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesEverythingUnchanged) {
  nn::ParamStore s = three_params();
  const nn::ParamStore before = s;
  AdamState st = adam_init(s);
  adam_step(s, nn::zero_grads(s), st, 0.1);
  EXPECT_TRUE(same_values(s, before, ""));
  for (const Tensor& m : st.m)
    for (double v : m.values()) EXPECT_EQ(v, 0.0);
  for (const Tensor& v : st.v)
    for (double x : v.values()) EXPECT_EQ(x, 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  nn::ParamStore s;
  s.add("x", Tensor(Shape{1}, 2.0));
  AdamState st = adam_init(s);
  nn::GradStore g = nn::zero_grads(s);
  g[0][0] = 1.0;
  adam_step(s, g, st, 0.01);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps), i.e. -lr up to eps.
  EXPECT_NEAR(s.get("x").value[0], 2.0 - 0.01 / (1 + 1e-8), 1e-15);
  EXPECT_NEAR(s.get("x").value[0] - 2.0, -0.01, 0.01 * 1e-8 + 1e-15);
}

TEST(Adam, MatchesReferenceTrace) {
  // Textbook Adam on f(x) = sum_i w_i (x_i - c_i)^2, written out per scalar.
  const double w[3] = {1.0, 3.0, 0.5}, c[3] = {0.2, -0.7, 2.0}, lr = 0.05;
  double x[3] = {0.5, 0.5, -1.0}, m[3] = {}, v[3] = {};
  nn::ParamStore s = three_params();
  AdamState st = adam_init(s);
  for (int t = 1; t <= 10; ++t) {
    nn::GradStore g = nn::zero_grads(s);
    const double xs[3] = {s.get("a").value[0], s.get("a").value[1], s.get("b").value[0]};
    g[0][0] = 2 * w[0] * (xs[0] - c[0]);
    g[0][1] = 2 * w[1] * (xs[1] - c[1]);
    g[1][0] = 2 * w[2] * (xs[2] - c[2]);
    adam_step(s, g, st, lr);
    for (int i = 0; i < 3; ++i) {
      const double gi = 2 * w[i] * (x[i] - c[i]);
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    ASSERT_NEAR(s.get("a").value[0], x[0], 1e-12) << "step " << t;
    ASSERT_NEAR(s.get("a").value[1], x[1], 1e-12) << "step " << t;
    ASSERT_NEAR(s.get("b").value[0], x[2], 1e-12) << "step " << t;
  }
}

TEST(Adam, NonFiniteGradientAbortsWithName) {
  nn::ParamStore s = three_params();
  const nn::ParamStore before = s;
  AdamState st = adam_init(s);
  nn::GradStore g = nn::zero_grads(s);
  g[0][0] = 1.0;
  g[1][0] = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(s, g, st, 0.1);
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.param(), "b");
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_TRUE(same_values(s, before, ""));
  EXPECT_EQ(st.step, 0);
  g[1][0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adam_step(s, g, st, 0.1), NonFiniteGradient);
  // A masked parameter is neither checked nor updated.
  adam_step(s, g, st, 0.1, {}, {true, false});
  EXPECT_EQ(s.get("b").value[0], -1.0);
  EXPECT_NE(s.get("a").value[0], 0.5);
}

TEST(CosineLr, Examples) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 10, 1e-3, 1e-5), 1e-3);
  EXPECT_DOUBLE_EQ(cosine_lr(10, 10, 1e-3, 1e-5), 1e-5);
  EXPECT_NEAR(cosine_lr(5, 10, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-18);
  EXPECT_THROW(cosine_lr(0, 0, 1e-3, 0), std::invalid_argument);
  EXPECT_THROW(cosine_lr(11, 10, 1e-3, 0), std::invalid_argument);
  EXPECT_THROW(cosine_lr(-1, 10, 1e-3, 0), std::invalid_argument);
  for (long s = 1; s <= 50; ++s) EXPECT_LE(cosine_lr(s, 50, 1.0, 0.01), cosine_lr(s - 1, 50, 1.0, 0.01));
}

TEST(EarlyStop, StrictlyImprovingNeverStops) {
  EarlyStopping es(5);
  for (int e = 1; e <= 20; ++e) EXPECT_FALSE(es.update(e, 100.0 - e));
  EXPECT_EQ(es.best_epoch(), 20);
  EXPECT_THROW(EarlyStopping(0), std::invalid_argument);
}

TEST(EarlyStop, StopsWhenBestIsPatienceEpochsOld) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int run = 0; run < 200; ++run) {
    const int patience = 1 + run % 6;
    EarlyStopping es(patience);
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0, stop_at = -1, expected = -1;
    for (int e = 1; e <= 40; ++e) {
      const double loss = u(rng) < 0.3 ? 1.0 : u(rng);  // ties with 1.0 are not improvements
      if (loss < best) {
        best = loss;
        best_epoch = e;
      }
      if (expected < 0 && e - best_epoch >= patience) expected = e;
      if (es.update(e, loss) && stop_at < 0) stop_at = e;
    }
    ASSERT_EQ(stop_at, expected) << "run " << run;
  }
}

TEST(TrainConfigTest, JsonAndValidation) {
  TrainConfig c;
  c.regime = Regime::FusionFrozen;
  c.lr = 1e-3;
  c.seed = 42;
  const TrainConfig r = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(r.regime, Regime::FusionFrozen);
  EXPECT_EQ(r.lr, 1e-3);
  EXPECT_EQ(r.seed, 42u);
  EXPECT_EQ(TrainConfig{}.lr, 3e-5);
  EXPECT_EQ(TrainConfig{}.patience, 5);
  EXPECT_EQ(TrainConfig{}.batch_size, 4);
  c.lr = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.lr = 1e-3;
  c.patience = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(model::regime_from_string("lidar"), std::invalid_argument);
  EXPECT_THROW(nlohmann::json({{"regime", "x"}}).get<TrainConfig>(), std::invalid_argument);
}

TEST(Experiment, JsonRoundTripAndHash) {
  const ExperimentConfig e = desk_experiment();
  const nlohmann::json j = e;
  const ExperimentConfig r = j.get<ExperimentConfig>();
  EXPECT_EQ(nlohmann::json(r), j);
  EXPECT_EQ(config_hash(j), config_hash(nlohmann::json(r)));
  nlohmann::json k = j;
  k["train"]["seed"] = 9;
  EXPECT_NE(config_hash(j), config_hash(k));
  EXPECT_EQ(config_hash(j).size(), 16u);
  k["bogus"] = 1;
  EXPECT_THROW(k.get<ExperimentConfig>(), std::invalid_argument);
  EXPECT_DOUBLE_EQ(e.train_for(Regime::FusionFinetune).lr, e.train.lr * e.finetune_lr_scale);
  EXPECT_DOUBLE_EQ(e.train_for(Regime::Cam3d).lr, e.train.lr);
}

TEST(ModelTest, ParameterPrefixesPerRegime) {
  auto prefixes = [](const Model& m) {
    std::set<std::string> out;
    for (const nn::Param& p : m.params()) {
      const auto a = p.name.find('.');
      const auto b = p.name.find('.', a + 1);
      out.insert(p.name.substr(0, p.name.rfind("cdsm", 0) == 0 ? a : b));
    }
    return out;
  };
  using S = std::set<std::string>;
  EXPECT_EQ(prefixes(Model::create(tiny_model(), Regime::Cam2d, 1)), (S{"camera.backbone", "camera.bifpn", "camera.head2d"}));
  EXPECT_EQ(prefixes(Model::create(tiny_model(), Regime::Cam3d, 1)),
            (S{"camera.backbone", "camera.bifpn", "cdsm", "cam3d.bifpn", "cam3d.head"}));
  EXPECT_EQ(prefixes(Model::create(tiny_model(), Regime::Radar3d, 1)),
            (S{"radar.vfe", "radar.backbone", "radar.bifpn", "radar.head"}));
  EXPECT_EQ(prefixes(Model::create(tiny_model(), Regime::FusionFrozen, 1)),
            (S{"camera.backbone", "camera.bifpn", "cdsm", "radar.vfe", "radar.backbone", "radar.bifpn", "fusion.bifpn",
               "fusion.head"}));
  // Initialization depends only on seed and name.
  const Model a = Model::create(tiny_model(), Regime::Cam3d, 3);
  const Model b = Model::create(tiny_model(), Regime::FusionFrozen, 3);
  EXPECT_TRUE(same_values(a.params(), b.params(), "camera."));
  EXPECT_TRUE(same_values(a.params(), b.params(), "cdsm."));
}

TEST(ModelTest, OutputsCoverEveryAnchor) {
  const auto sc = scenes(1, 10);
  for (Regime r : {Regime::Cam2d, Regime::Cam3d, Regime::Radar3d, Regime::FusionFinetune}) {
    const Model m = Model::create(tiny_model(), r, 1);
    const model::Sample s = m.prepare(sc[0]);
    nn::Binding bind(m.params(), false);
    const auto out = m.forward(bind, s);
    EXPECT_EQ(out.probs.value().size(), static_cast<Index>(m.anchors().size())) << model::to_string(r);
    EXPECT_EQ(out.codes.shape(), (Shape{static_cast<Index>(m.anchors().size()), m.code_size()}));
    EXPECT_EQ(s.targets.label.size(), m.anchors().size());
    EXPECT_GT(s.targets.num_pos, 0) << model::to_string(r);
  }
  // 256x128 image: P3..P7 anchors; 20x20 BEV grid: 3 levels.
  EXPECT_EQ(Model::create(tiny_model(), Regime::Cam2d, 1).anchors().size(),
            9u * (32 * 16 + 16 * 8 + 8 * 4 + 4 * 2 + 2 * 1));
  EXPECT_EQ(Model::create(tiny_model(), Regime::Radar3d, 1).anchors().size(), 9u * (400 + 100 + 25));
}

TEST(ModelTest, ConfigValidation) {
  auto c = tiny_model();
  c.image_width = 200;
  EXPECT_THROW(Model::create(c, Regime::Cam3d, 1), std::invalid_argument);
  c = tiny_model();
  c.cell = 3.0;
  EXPECT_THROW(Model::create(c, Regime::Cam3d, 1), std::invalid_argument);
  c = tiny_model();
  c.camera_channels = 0;
  EXPECT_THROW(Model::create(c, Regime::Cam3d, 1), std::invalid_argument);
}

TEST(ModelTest, CachedFrozenFeaturesMatchFullForward) {
  const auto sc = scenes(1, 20);
  const Model m = Model::create(tiny_model(), Regime::FusionFrozen, 2);
  const model::Sample s = m.prepare(sc[0]);
  const model::FrozenFeatures f = m.frozen_features(s);
  nn::Binding b1(m.params(), false), b2(m.params(), false);
  const auto full = m.forward(b1, s);
  const auto cached = m.forward(b2, s, &f);
  EXPECT_TRUE(equal_values(full.probs.value(), cached.probs.value()));
  EXPECT_TRUE(equal_values(full.codes.value(), cached.codes.value()));
  EXPECT_THROW(Model::create(tiny_model(), Regime::Cam3d, 1).frozen_features(s), std::logic_error);
}

TEST(Training, FrozenRegimeOnlyMovesCdsmAndFusion) {
  const Model m0 = Model::create(tiny_model(), Regime::FusionFrozen, 5);
  Model m = m0;
  const auto train_set = train::prepare_all(m, scenes(4, 30));
  TrainConfig c;
  c.regime = Regime::FusionFrozen;
  c.lr = 1e-2;
  c.epochs = 2;
  train::train(m, train_set, {}, c);
  EXPECT_TRUE(same_values(m.params(), m0.params(), "camera."));
  EXPECT_TRUE(same_values(m.params(), m0.params(), "radar."));
  EXPECT_FALSE(same_values(m.params(), m0.params(), "cdsm."));
  EXPECT_FALSE(same_values(m.params(), m0.params(), "fusion."));
}

TEST(Training, DeterministicAndThreadInvariant) {
  const auto sc = scenes(5, 40);
  auto run = [&](int threads) {
    Model m = Model::create(tiny_model(), Regime::Radar3d, 6);
    const auto train_set = train::prepare_all(m, sc);
    TrainConfig c;
    c.regime = Regime::Radar3d;
    c.lr = 1e-2;
    c.epochs = 3;
    c.seed = 11;
    c.threads = threads;
    const TrainResult r = train::train(m, train_set, {}, c);
    return std::make_pair(r, m.params());
  };
  const auto [r1, p1] = run(1);
  const auto [r2, p2] = run(1);
  const auto [r3, p3] = run(3);
  ASSERT_EQ(r1.log.size(), 3u);
  for (std::size_t e = 0; e < r1.log.size(); ++e) {
    EXPECT_EQ(r1.log[e].train_loss, r2.log[e].train_loss);
    EXPECT_EQ(r1.log[e].train_loss, r3.log[e].train_loss);
    EXPECT_EQ(r1.log[e].val_loss, r3.log[e].val_loss);
  }
  EXPECT_TRUE(same_values(p1, p2, ""));
  EXPECT_TRUE(same_values(p1, p3, ""));
  EXPECT_EQ(nlohmann::json(r1.log).dump(), nlohmann::json(r2.log).dump());
}

TEST(Training, EarlyStoppingAndBestRestore) {
  Model m = Model::create(tiny_model(), Regime::Radar3d, 7);
  const auto train_set = train::prepare_all(m, scenes(2, 50));
  const auto val_set = train::prepare_all(m, scenes(2, 60));
  TrainConfig c;
  c.regime = Regime::Radar3d;
  c.lr = 0.5;  // diverges, so validation stops improving
  c.epochs = 40;
  c.patience = 2;
  std::vector<double> vals;
  const TrainResult r = train::train(m, train_set, val_set, c, [&](const EpochLog& e) { vals.push_back(e.val_loss); });
  ASSERT_TRUE(r.stopped_early);
  EXPECT_EQ(static_cast<int>(r.log.size()), r.best_epoch + 2);
  EXPECT_EQ(r.best_val, *std::min_element(vals.begin(), vals.end()));
  // Restored parameters reproduce the best validation loss.
  double v = 0;
  for (const auto& s : val_set) {
    nn::Binding b(m.params(), false);
    v += m.loss(b, s, c.focal).total.value()[0];
  }
  EXPECT_DOUBLE_EQ(v / val_set.size(), r.best_val);
}

TEST(Training, Errors) {
  Model m = Model::create(tiny_model(), Regime::Radar3d, 8);
  TrainConfig c;
  c.regime = Regime::Cam3d;
  const auto ts = train::prepare_all(m, scenes(1, 70));
  EXPECT_THROW(train::train(m, ts, {}, c), std::invalid_argument);
  c.regime = Regime::Radar3d;
  EXPECT_THROW(train::train(m, {}, {}, c), std::invalid_argument);
  // A NaN parameter surfaces as a named non-finite gradient.
  m.params()[0].value[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train::train(m, ts, {}, c);
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.param().rfind("radar.", 0), 0u);
  }
}

TEST(Pretrained, LoadsAndReportsMissingCheckpoints) {
  const auto dir = temp_dir("pretrained");
  const Model cam = Model::create(tiny_model(), Regime::Cam3d, 21);
  const Model rad = Model::create(tiny_model(), Regime::Radar3d, 22);
  nn::save_checkpoint(cam.params(), dir / "cam.ckpt");
  nn::save_checkpoint(rad.params(), dir / "rad.ckpt");

  Model fz = Model::create(tiny_model(), Regime::FusionFrozen, 23);
  EXPECT_THROW(load_pretrained(fz, {}), MissingCheckpoint);
  EXPECT_THROW(load_pretrained(fz, {dir / "cam.ckpt", dir / "nope.ckpt", {}}), MissingCheckpoint);
  // A radar checkpoint in the camera slot has no camera weights.
  EXPECT_THROW(load_pretrained(fz, {dir / "rad.ckpt", dir / "rad.ckpt", {}}), MissingCheckpoint);
  load_pretrained(fz, {dir / "cam.ckpt", dir / "rad.ckpt", {}});
  EXPECT_TRUE(same_values(fz.params(), cam.params(), "camera."));
  EXPECT_TRUE(same_values(fz.params(), cam.params(), "cdsm."));
  EXPECT_TRUE(same_values(fz.params(), rad.params(), "radar."));

  nn::save_checkpoint(fz.params(), dir / "fz.ckpt");
  Model ft = Model::create(tiny_model(), Regime::FusionFinetune, 24);
  EXPECT_THROW(load_pretrained(ft, {}), MissingCheckpoint);
  EXPECT_THROW(load_pretrained(ft, {{}, {}, dir / "cam.ckpt"}), MissingCheckpoint);
  load_pretrained(ft, {{}, {}, dir / "fz.ckpt"});
  EXPECT_TRUE(same_values(ft.params(), fz.params(), ""));
  std::filesystem::remove_all(dir);
}

TEST(Evaluate, PerfectDetectionsScoreOne) {
  const auto sc = scenes(3, 80);
  for (Regime r : {Regime::Cam2d, Regime::Cam3d}) {
    const Model m = Model::create(tiny_model(), r, 1);
    const auto samples = train::prepare_all(m, sc);
    std::vector<det::SceneDetections> dets;
    for (const auto& s : samples) {
      det::SceneDetections d{s.id, m.kind(), s.boxes2d, s.eval3d};
      dets.push_back(d);
    }
    const auto rep = train::evaluate(m, samples, dets);
    EXPECT_DOUBLE_EQ(rep.map, 1.0) << model::to_string(r);
  }
}
