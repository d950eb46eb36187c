// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cdsm/fusion.hpp"
#include "cdsm/synth.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cdsm;
using namespace cdsm::fusion;
using geom::AxisRotation;
using nn::Var;

namespace {

const CameraCalib kCalib = data::synth_calib(data::SynthConfig{});
const ImageSize kImage{512, 384};

OrientedTensor camera_level(const Tensor& hwc) { return {hwc, camera_hwc_labels()}; }

Tensor chw_to_hwc(const Tensor& chw) {
  const Index C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor out(Shape{H, W, C});
  for (Index c = 0; c < C; ++c)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) out[(h * W + w) * C + c] = chw[(c * H + h) * W + w];
  return out;
}

// HWC level of the given stride whose value depends on column and channel
// only: f = 10 * col + c + 1.
Tensor column_coded(Index stride, Index C) {
  const Index H = kImage.height / stride, W = kImage.width / stride;
  Tensor t(Shape{H, W, C});
  for (Index h = 0; h < H; ++h)
    for (Index w = 0; w < W; ++w)
      for (Index c = 0; c < C; ++c) t[(h * W + w) * C + c] = 10.0 * w + c + 1;
  return t;
}

bool oracle_in_fov(double x, double y) {
  // Horizontal half-angles of the frustum on either side of the axis.
  const double left = std::atan2(kCalib.cx, kCalib.fx);
  const double right = std::atan2(kImage.width - kCalib.cx, kCalib.fx);
  const double az = std::atan2(y, x);
  return x > 0 && az <= left && az > -right;
}

Var flatten_levels(const nn::LevelSet& s) {
  std::vector<Var> parts;
  for (const Var& v : s.maps) parts.push_back(nn::reshape(v, {v.value().size()}));
  return nn::concat(parts);
}

}  // namespace

TEST(Align, IdentityChainKeepsEverything) {
  std::mt19937_64 rng(1);
  const Tensor t = oracle::random_tensor({6, 8, 3}, rng);
  const auto out = align_camera_features({camera_level(t)}, {});
  EXPECT_EQ(out[0].data, t);
  EXPECT_EQ(out[0].labels, camera_hwc_labels());
}

TEST(Align, DefaultChainOnP3) {
  std::mt19937_64 rng(2);
  const Tensor t = oracle::random_tensor({48, 64, 5}, rng);
  const auto out = align_camera_features({camera_level(t)});
  EXPECT_EQ(out[0].data.shape(), (Shape{5, 64, 48}));
  EXPECT_TRUE(geom::bev_oriented(out[0].labels));
  EXPECT_EQ(out[0].labels[0], (AxisLabel{Axis::X, +1}));
  EXPECT_EQ(out[0].labels[1], (AxisLabel{Axis::Y, +1}));
  EXPECT_EQ(out[0].labels[2], (AxisLabel{Axis::Z, -1}));
  EXPECT_EQ(out[0].data, oracle::brute_rotate(t, oracle::chain_matrix(geom::default_camera_chain())));
}

TEST(Align, TwiceEqualsMatrixSquare) {
  std::mt19937_64 rng(3);
  const Tensor t = oracle::random_tensor({4, 6, 5}, rng);
  const auto once = align_camera_features({camera_level(t)});
  const auto twice = align_camera_features(once);
  const oracle::Mat3 m = oracle::chain_matrix(geom::default_camera_chain());
  const oracle::Mat3 sq = oracle::matmul(m, m);
  // The chain is a half turn, so its square is the identity.
  EXPECT_EQ(sq, (oracle::Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}));
  EXPECT_NE(once[0].data.shape(), t.shape());
  EXPECT_EQ(twice[0].data, oracle::brute_rotate(t, sq));
  EXPECT_EQ(twice[0].data, t);
  EXPECT_EQ(twice[0].labels, camera_hwc_labels());
}

TEST(Align, ChannelsFirstGatherMatchesTensorPath) {
  std::mt19937_64 rng(4);
  const Tensor chw = oracle::random_tensor({3, 6, 8}, rng);
  for (const auto& chain : {geom::default_camera_chain(), RotationChain{}, RotationChain{geom::rot_x(90)}}) {
    const AlignedLevel a = align_level(Var::constant(chw), chain);
    const OrientedTensor ref = align_camera_features({camera_level(chw_to_hwc(chw))}, chain)[0];
    EXPECT_EQ(a.data.value(), ref.data);
    EXPECT_EQ(a.labels, ref.labels);
  }
  const auto r = gradcheck::check(
      [](const std::vector<Var>& v) { return align_level(v[0], geom::default_camera_chain()).data; }, {chw});
  EXPECT_LT(r.rel_err, 1e-8);
}

TEST(Bins, Validation) {
  EXPECT_NO_THROW(DistanceBinConfig{}.validate());
  auto rejects = [](std::vector<DistanceBin> b) {
    EXPECT_THROW(DistanceBinConfig{b}.validate(), std::invalid_argument);
  };
  rejects({});
  rejects({{3, 30, 80}, {4, 0, 40}});              // overlap
  rejects({{3, 45, 80}, {4, 0, 40}});              // gap
  rejects({{4, 40, 80}, {3, 0, 40}});              // finer level nearer
  rejects({{3, 40, 70}, {4, 0, 40}});              // short of the far edge
  rejects({{3, 40, 40}, {4, 0, 40}});              // empty range
  EXPECT_NO_THROW((DistanceBinConfig{{{3, 0, 80}}}.validate()));
  EXPECT_EQ(DistanceBinConfig{}.level_at(50.5), 3);
  EXPECT_EQ(DistanceBinConfig{}.level_at(20.0), 4);
  EXPECT_EQ(DistanceBinConfig{}.level_at(19.99), 5);
  EXPECT_FALSE(DistanceBinConfig{}.level_at(80.0).has_value());
}

TEST(Bins, JsonRoundTrip) {
  const DistanceBinConfig c;
  const DistanceBinConfig back = nlohmann::json(c).get<DistanceBinConfig>();
  ASSERT_EQ(back.bins.size(), 3u);
  EXPECT_EQ(back.bins[1].level, 4);
  EXPECT_EQ(back.bins[1].near, 20.0);
}

TEST(FovMaskTest, MatchesAzimuthOracle) {
  const FovMask m = make_fov_mask(kCalib, kImage);
  Index n = 0;
  for (Index ix = 0; ix < 80; ++ix)
    for (Index iy = 0; iy < 80; ++iy) {
      EXPECT_EQ(m(ix, iy), oracle_in_fov(ix + 0.5, iy - 40 + 0.5)) << ix << "," << iy;
      n += oracle_in_fov(ix + 0.5, iy - 40 + 0.5);
    }
  EXPECT_EQ(m.count(), n);
  EXPECT_GT(n, 2000);
  EXPECT_LT(n, 6400);
  CameraCalib shifted = kCalib;
  shifted.pose.translation.x = 10.0;
  const FovMask ms = make_fov_mask(shifted, kImage);
  for (Index iy = 0; iy < 80; ++iy) EXPECT_FALSE(ms(5, iy));
}

TEST(Aggregate, EmptyMaskGivesZero) {
  FovMask m = make_fov_mask(kCalib, kImage);
  std::fill(m.cells.begin(), m.cells.end(), 0);
  std::mt19937_64 rng(5);
  const auto aligned = align_camera_features({camera_level(oracle::random_tensor({48, 64, 4}, rng)),
                                              camera_level(oracle::random_tensor({24, 32, 4}, rng)),
                                              camera_level(oracle::random_tensor({12, 16, 4}, rng))});
  const OrientedTensor bev = aggregate_to_bev(aligned, kCalib, DistanceBinConfig{}, m);
  EXPECT_EQ(bev.data.shape(), (Shape{80, 80, 4}));
  EXPECT_EQ(max_abs(bev.data), 0.0);
}

TEST(Aggregate, UniformSingleLevel) {
  const FovMask m = make_fov_mask(kCalib, kImage);
  const auto aligned = align_camera_features({camera_level(Tensor(Shape{48, 64, 3}, 0.7))});
  const OrientedTensor bev = aggregate_to_bev(aligned, kCalib, DistanceBinConfig{{{3, 0, 80}}}, m);
  EXPECT_TRUE(geom::bev_oriented(bev.data.rank() == 3 ? bev.labels : std::vector<AxisLabel>{}));
  EXPECT_EQ(bev.labels[2].axis, Axis::Channel);
  for (Index ix = 0; ix < 80; ++ix)
    for (Index iy = 0; iy < 80; ++iy)
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(bev.data[(ix * 80 + iy) * 3 + c], m(ix, iy) ? 0.7 : 0.0);
}

TEST(Aggregate, TwoLevelsRespectBins) {
  const FovMask m = make_fov_mask(kCalib, kImage);
  const DistanceBinConfig bins{{{3, 40, 80}, {4, 0, 40}}};
  const auto aligned = align_camera_features({camera_level(Tensor(Shape{48, 64, 2}, 1.0)),
                                              camera_level(Tensor(Shape{24, 32, 2}, 2.0))});
  const OrientedTensor bev = aggregate_to_bev(aligned, kCalib, bins, m);
  for (Index ix = 0; ix < 80; ++ix)
    for (Index iy = 0; iy < 80; ++iy) {
      const double expect = !m(ix, iy) ? 0.0 : (ix + 0.5 >= 40 ? 1.0 : 2.0);
      EXPECT_EQ(bev.data[(ix * 80 + iy) * 2], expect);
    }
  EXPECT_EQ(bev.data[(50 * 80 + 40) * 2 + 1], 1.0);
}

TEST(Aggregate, ColumnLookupMatchesRayOracle) {
  const FovMask m = make_fov_mask(kCalib, kImage);
  const auto aligned = align_camera_features(
      {camera_level(column_coded(8, 2)), camera_level(column_coded(16, 2)), camera_level(column_coded(32, 2))});
  const OrientedTensor bev = aggregate_to_bev(aligned, kCalib, DistanceBinConfig{}, m);
  for (Index ix = 0; ix < 80; ++ix) {
    const double x = ix + 0.5;
    const Index stride = x >= 40 ? 8 : (x >= 20 ? 16 : 32);
    for (Index iy = 0; iy < 80; ++iy) {
      const double y = iy - 40 + 0.5;
      for (Index c = 0; c < 2; ++c) {
        double expect = 0.0;
        if (m(ix, iy)) {
          const double q = (kCalib.cx - kCalib.fx * y / x) / stride;
          expect = 10.0 * std::floor(q) + c + 1;
          // On an exact column edge either neighbor is acceptable.
          if (std::abs(q - std::round(q)) < 1e-9 && bev.data[(ix * 80 + iy) * 2 + c] == expect - 10.0) continue;
        }
        ASSERT_EQ(bev.data[(ix * 80 + iy) * 2 + c], expect) << ix << "," << iy;
      }
    }
  }
}

TEST(Aggregate, ZeroOutsideMaskAndSingleLevelPerCell) {
  const FovMask m = make_fov_mask(kCalib, kImage);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<OrientedTensor> lv{camera_level(oracle::random_tensor({48, 64, 3}, rng)),
                                   camera_level(oracle::random_tensor({24, 32, 3}, rng)),
                                   camera_level(oracle::random_tensor({12, 16, 3}, rng))};
    const Tensor all = aggregate_to_bev(align_camera_features(lv), kCalib, DistanceBinConfig{}, m).data;
    std::vector<Tensor> alone;
    for (std::size_t k = 0; k < 3; ++k) {
      std::vector<OrientedTensor> only = lv;
      for (std::size_t j = 0; j < 3; ++j) {
        if (j != k) only[j].data = Tensor(only[j].data.shape());
      }
      alone.push_back(aggregate_to_bev(align_camera_features(only), kCalib, DistanceBinConfig{}, m).data);
    }
    for (Index i = 0; i < all.size(); ++i) {
      const Index cell = i / 3;
      if (!m(cell / 80, cell % 80)) ASSERT_EQ(all[i], 0.0);
      int sources = 0;
      for (const Tensor& a : alone) sources += a[i] != 0.0;
      ASSERT_LE(sources, 1);
      ASSERT_EQ(all[i], alone[0][i] + alone[1][i] + alone[2][i]);
    }
  }
}

TEST(Aggregate, Errors) {
  const FovMask m = make_fov_mask(kCalib, kImage);
  const auto aligned = align_camera_features({camera_level(Tensor(Shape{48, 64, 2}, 1.0))});
  EXPECT_THROW(aggregate_to_bev(aligned, kCalib, DistanceBinConfig{{}}, m), std::invalid_argument);
  // Unaligned input.
  EXPECT_THROW(aggregate_to_bev({camera_level(Tensor(Shape{48, 64, 2}, 1.0))}, kCalib, DistanceBinConfig{{{3, 0, 80}}}, m),
               std::invalid_argument);
  // A bin whose level is absent.
  EXPECT_THROW(aggregate_to_bev(aligned, kCalib, DistanceBinConfig{}, m), std::invalid_argument);
}

TEST(Refine, ShapesZeroAndGradient) {
  nn::ParamStore store;
  const BevRefiner r = BevRefiner::create(store, "cdsm.refine", 3, 2, false, 1);
  nn::Binding bind(store, false);
  const nn::LevelSet out = r(bind, Var::constant(Tensor(Shape{3, 80, 80})));
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].shape(), (Shape{3, 80, 80}));
  EXPECT_EQ(out[1].shape(), (Shape{3, 40, 40}));
  EXPECT_EQ(out[2].shape(), (Shape{3, 20, 20}));
  EXPECT_EQ(out.strides, (std::vector<int>{1, 2, 4}));
  for (const Var& v : out.maps) EXPECT_EQ(max_abs(v.value()), 0.0);
  EXPECT_THROW(r(bind, Var::constant(Tensor(Shape{3, 10, 10}))), std::invalid_argument);

  nn::ParamStore small;
  const BevRefiner rs = BevRefiner::create(small, "cdsm.refine", 3, 1, true, 2);
  std::mt19937_64 rng(7);
  const auto res = gradcheck::check_module(small, {gradcheck::randn({3, 8, 8}, rng)},
                                           [&](nn::Binding& b, const std::vector<Var>& v) {
                                             return flatten_levels(rs(b, v[0]));
                                           });
  EXPECT_LT(res.rel_err, 1e-4) << res.worst;
}

TEST(Fuse, ConcatLocalityAndShapes) {
  std::mt19937_64 rng(8);
  auto levels = [&](Index C, bool zero) {
    nn::LevelSet s{{}, {1, 2, 4}};
    for (Index n : {8, 4, 2}) s.maps.push_back(Var::constant(zero ? Tensor(Shape{C, n, n}) : gradcheck::randn({C, n, n}, rng)));
    return s;
  };
  const nn::LevelSet radar = levels(4, false);
  const nn::LevelSet joined = concat_levels(levels(3, true), radar);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(joined[i].dim(0), 7);
    const Index n = radar[i].value().size();
    for (Index k = 0; k < n; ++k) EXPECT_EQ(joined[i].value()[3 * n / 4 + k], radar[i].value()[k]);
  }
  nn::ParamStore store;
  const FusionNeck neck = FusionNeck::create(store, "fusion.bifpn", 3, 4, 1, 3);
  nn::Binding bind(store, false);
  for (const auto& out : {neck(bind, levels(3, true), radar), neck(bind, levels(3, false), levels(4, true))}) {
    for (const Var& v : out.maps)
      for (double x : v.value().values()) ASSERT_TRUE(std::isfinite(x));
  }
  nn::LevelSet bad = levels(4, false);
  bad.maps[1] = Var::constant(Tensor(Shape{4, 5, 5}));
  try {
    concat_levels(levels(3, false), bad);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("level 1"), std::string::npos);
  }
  EXPECT_THROW(neck(bind, levels(2, false), radar), std::invalid_argument);
}

TEST(CdsmComposite, EndToEndGradientReachesBothBranches) {
  // Tiny camera: 128x64 image, BEV 16 m x 16 m at 2 m cells.
  CameraCalib calib;
  calib.fx = calib.fy = 64;
  calib.cx = 64;
  calib.cy = 32;
  const ImageSize image{128, 64};
  BevGrid grid;
  grid.fov = {0, 16, -8, 8, 0, 5};
  grid.cell = 2.0;
  const FovMask mask = make_fov_mask(calib, image, grid);
  ASSERT_GT(mask.count(), 20);

  CdsmConfig cfg;
  cfg.channels = 3;
  cfg.refine_convs = 1;
  cfg.bins = DistanceBinConfig{{{3, 8, 16}, {4, 4, 8}, {5, 0, 4}}};
  nn::ParamStore store;
  const CdsmBlock block = CdsmBlock::create(store, "cdsm", cfg, 2, 11);
  const FusionNeck neck = FusionNeck::create(store, "fusion.bifpn", 3, 3, 1, 12);

  std::mt19937_64 rng(9);
  gradcheck::jitter(store, rng);
  std::vector<Tensor> inputs{gradcheck::randn({2, 8, 16}, rng), gradcheck::randn({2, 4, 8}, rng),
                             gradcheck::randn({2, 2, 4}, rng),  gradcheck::randn({3, 8, 8}, rng),
                             gradcheck::randn({3, 4, 4}, rng),  gradcheck::randn({3, 2, 2}, rng)};
  auto model = [&](nn::Binding& b, const std::vector<Var>& v) {
    const nn::LevelSet cam{{v[0], v[1], v[2]}, {8, 16, 32}};
    const nn::LevelSet radar{{v[3], v[4], v[5]}, {1, 2, 4}};
    return flatten_levels(neck(b, block(b, cam, calib, mask), radar));
  };
  const auto res = gradcheck::check_module(store, inputs, model);
  EXPECT_LT(res.rel_err, 1e-4) << res.worst;

  // Both branches receive nonzero gradient.
  nn::Binding bind(store, true);
  std::vector<Var> xs;
  for (const Tensor& t : inputs) xs.push_back(Var::leaf(t, true));
  nn::backward(nn::sum(model(bind, xs)));
  EXPECT_GT(max_abs(xs[0].grad()), 0.0);
  EXPECT_GT(max_abs(xs[3].grad()), 0.0);
  nn::GradStore g = nn::zero_grads(store);
  bind.accumulate(g);
  EXPECT_GT(max_abs(g[store.index_of("cdsm.proj_p3.w")]), 0.0);
  EXPECT_GT(max_abs(g[store.index_of("fusion.bifpn.r0.td0.conv.w")]), 0.0);

  // Deterministic.
  nn::Binding b1(store, false), b2(store, false);
  std::vector<Var> c1, c2;
  for (const Tensor& t : inputs) c1.push_back(Var::constant(t)), c2.push_back(Var::constant(t));
  EXPECT_EQ(model(b1, c1).value(), model(b2, c2).value());
}
