// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cdsm/nn/checkpoint.hpp"
#include "cdsm/nn/layers.hpp"
#include "gradcheck.hpp"

using namespace cdsm;
using namespace cdsm::nn;
using gradcheck::check;
using gradcheck::randn;

namespace {
constexpr double kTol = 1e-4;
}  // namespace

TEST(Activations, Goldens) {
  const Var x = Var::constant(Tensor({3}, std::vector<double>{-2.0, 0.0, 1.0}));
  const Var l = leaky_relu(x, 0.1);
  EXPECT_DOUBLE_EQ(l.value()[0], -0.2);
  EXPECT_DOUBLE_EQ(l.value()[1], 0.0);
  const Var m = mish(x);
  EXPECT_DOUBLE_EQ(m.value()[1], 0.0);
  const long double one = 1.0L;
  const long double ref = one * std::tanh(std::log1p(std::exp(one)));
  EXPECT_NEAR(m.value()[2], static_cast<double>(ref), 1e-15);
  EXPECT_NEAR(m.value()[2], 0.86509838826731, 1e-12);
}

TEST(Activations, Gradients) {
  std::mt19937_64 rng(1);
  const Tensor x = gradcheck::rand_away_from_zero({2, 3, 4}, rng);
  EXPECT_LT(check([](auto v) { return leaky_relu(v[0], 0.1); }, {x}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return mish(v[0]); }, {randn({2, 3, 4}, rng, 2.0)}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return sigmoid(v[0]); }, {randn({2, 3, 4}, rng, 2.0)}).rel_err, kTol);
}

TEST(Elementwise, Gradients) {
  std::mt19937_64 rng(2);
  const Tensor a = randn({3, 4}, rng), b = randn({3, 4}, rng);
  EXPECT_LT(check([](auto v) { return add(v[0], v[1]); }, {a, b}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return mul(v[0], v[1]); }, {a, b}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return scale(v[0], -1.7); }, {a}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return reshape(v[0], {12}); }, {a}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return mean(v[0]); }, {a}).rel_err, kTol);
}

TEST(Conv2d, IdentityKernelIsIdentity) {
  std::mt19937_64 rng(3);
  const Tensor x = randn({3, 5, 5}, rng);
  Tensor w({3, 3, 1, 1});
  for (Index c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  const Var y = conv2d(Var::constant(x), Var::constant(w), Var(), 1, 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, OutputShapes) {
  const Var x = Var::constant(Tensor({2, 80, 80}));
  const Var w = Var::constant(Tensor({4, 2, 3, 3}));
  EXPECT_EQ(conv2d(x, w, Var(), 2, 1).shape(), (Shape{4, 40, 40}));
  EXPECT_EQ(conv2d(x, w, Var(), 1, 1).shape(), (Shape{4, 80, 80}));
  const Var bad = Var::constant(Tensor({4, 3, 3, 3}));
  EXPECT_THROW(conv2d(x, bad, Var(), 1, 1), std::invalid_argument);
}

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(4);
  const Tensor x = randn({2, 6, 7}, rng), w = randn({3, 2, 3, 3}, rng), b = randn({3}, rng);
  for (int stride : {1, 2}) {
    const Var y = conv2d(Var::constant(x), Var::constant(w), Var::constant(b), stride, 1);
    for (Index o = 0; o < 3; ++o)
      for (Index i = 0; i < y.dim(1); ++i)
        for (Index j = 0; j < y.dim(2); ++j) {
          double s = b[o];
          for (Index c = 0; c < 2; ++c)
            for (Index ki = 0; ki < 3; ++ki)
              for (Index kj = 0; kj < 3; ++kj) {
                const Index yi = i * stride + ki - 1, xj = j * stride + kj - 1;
                if (yi >= 0 && yi < 6 && xj >= 0 && xj < 7) s += w.at({o, c, ki, kj}) * x.at3(c, yi, xj);
              }
          EXPECT_NEAR(y.value().at3(o, i, j), s, 1e-12);
        }
  }
}

TEST(Conv2d, Gradients) {
  std::mt19937_64 rng(5);
  const Tensor x = randn({2, 5, 5}, rng), w3 = randn({3, 2, 3, 3}, rng), b = randn({3}, rng);
  EXPECT_LT(check([](auto v) { return conv2d(v[0], v[1], v[2], 1, 1); }, {x, w3, b}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return conv2d(v[0], v[1], v[2], 2, 1); }, {x, w3, b}).rel_err, kTol);
  const Tensor w1 = randn({3, 2, 1, 1}, rng);
  EXPECT_LT(check([](auto v) { return conv2d(v[0], v[1], v[2], 1, 0); }, {x, w1, b}).rel_err, kTol);
  const Tensor x8 = randn({2, 8, 8}, rng), w4 = randn({3, 2, 4, 4}, rng);
  EXPECT_LT(check([](auto v) { return conv2d(v[0], v[1], Var(), 4, 0); }, {x8, w4}).rel_err, kTol);
}

TEST(LayerNorm, ConstantInputGivesShift) {
  const Var x = Var::constant(Tensor({4, 2, 2}, 3.25));
  const Var g = Var::constant(Tensor({4}, 2.0));
  Tensor bt({4});
  for (Index c = 0; c < 4; ++c) bt[c] = 0.5 * static_cast<double>(c);
  const Var y = layer_norm(x, g, Var::constant(bt));
  for (Index c = 0; c < 4; ++c)
    for (Index n = 0; n < 4; ++n) EXPECT_EQ(y.value()[c * 4 + n], bt[c]);
}

TEST(LayerNorm, NormalizesPerLocation) {
  std::mt19937_64 rng(6);
  const Tensor x = randn({16, 3, 3}, rng, 3.0);
  const Var y = layer_norm(Var::constant(x), Var::constant(Tensor({16}, 1.0)), Var::constant(Tensor({16})));
  for (Index n = 0; n < 9; ++n) {
    double mu = 0, var = 0;
    for (Index c = 0; c < 16; ++c) mu += y.value()[c * 9 + n] / 16;
    for (Index c = 0; c < 16; ++c) var += std::pow(y.value()[c * 9 + n] - mu, 2) / 16;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(var), 1.0, 1e-5);
  }
}

TEST(LayerNorm, Gradients) {
  std::mt19937_64 rng(7);
  EXPECT_LT(check([](auto v) { return layer_norm(v[0], v[1], v[2]); },
                  {randn({4, 3, 3}, rng), randn({4}, rng), randn({4}, rng)})
                .rel_err,
            kTol);
}

TEST(Resampling, ShapesAndGradients) {
  std::mt19937_64 rng(8);
  const Tensor x = randn({2, 4, 6}, rng);
  EXPECT_EQ(upsample2x(Var::constant(x)).shape(), (Shape{2, 8, 12}));
  EXPECT_EQ(avg_pool2x(Var::constant(x)).shape(), (Shape{2, 2, 3}));
  EXPECT_THROW(avg_pool2x(Var::constant(Tensor({1, 3, 4}))), std::invalid_argument);
  EXPECT_LT(check([](auto v) { return upsample2x(v[0]); }, {x}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return avg_pool2x(v[0]); }, {x}).rel_err, kTol);
}

TEST(Layout, ConcatGatherMax) {
  std::mt19937_64 rng(9);
  const Tensor a = randn({2, 3, 3}, rng), b = randn({4, 3, 3}, rng);
  const Var c = concat({Var::constant(a), Var::constant(b)});
  EXPECT_EQ(c.shape(), (Shape{6, 3, 3}));
  EXPECT_THROW(concat({Var::constant(a), Var::constant(Tensor({1, 2, 3}))}), std::invalid_argument);
  EXPECT_LT(check([](auto v) { return concat({v[0], v[1]}); }, {a, b}).rel_err, kTol);

  auto src = std::make_shared<std::vector<Index>>(std::vector<Index>{5, -1, 0, 5, 17, 3});
  EXPECT_LT(check([src](auto v) { return gather(v[0], src, {2, 3}); }, {a}).rel_err, kTol);
  const Var g = gather(Var::constant(a), src, {2, 3});
  EXPECT_EQ(g.value()[1], 0.0);
  EXPECT_EQ(g.value()[0], a[5]);

  const Tensor m = randn({3, 4, 5}, rng);
  for (std::size_t ax = 0; ax < 3; ++ax) {
    EXPECT_LT(check([ax](auto v) { return max_axis(v[0], ax); }, {m}).rel_err, kTol);
  }
}

TEST(Dense, Gradients) {
  std::mt19937_64 rng(10);
  const Tensor a = randn({4, 3}, rng), b = randn({3, 5}, rng), bias = randn({5}, rng);
  EXPECT_LT(check([](auto v) { return matmul(v[0], v[1]); }, {a, b}).rel_err, kTol);
  EXPECT_LT(check([](auto v) { return add_row_bias(v[0], v[1]); }, {b, bias}).rel_err, kTol);
  const Tensor x = randn({3 * 4, 2}, rng);
  const std::vector<int> counts{1, 4, 2};
  EXPECT_LT(check([&](auto v) { return masked_group_max(v[0], counts, 4); }, {x}).rel_err, kTol);
  EXPECT_THROW(masked_group_max(Var::constant(x), {0, 1, 1}, 4), std::invalid_argument);
}

TEST(MaskedGroupMax, IgnoresPadding) {
  Tensor x({4, 1}, std::vector<double>{1.0, 100.0, 2.0, 3.0});
  const Var y = masked_group_max(Var::constant(x), {1, 2}, 2);
  EXPECT_EQ(y.value()[0], 1.0);
  EXPECT_EQ(y.value()[1], 3.0);
}

TEST(WeightedFusion, EqualWeightsAverage) {
  std::mt19937_64 rng(11);
  const Tensor a = randn({2, 2, 2}, rng), b = randn({2, 2, 2}, rng), c = randn({2, 2, 2}, rng);
  const Var y = weighted_fusion({Var::constant(a), Var::constant(b), Var::constant(c)},
                                Var::constant(Tensor({3}, 1.0)));
  for (Index i = 0; i < 8; ++i) EXPECT_NEAR(y.value()[i], (a[i] + b[i] + c[i]) / (3.0 + 1e-4), 1e-15);
  const Var neg = weighted_fusion({Var::constant(a), Var::constant(b)},
                                  Var::constant(Tensor({2}, std::vector<double>{-1.0, 2.0})));
  for (Index i = 0; i < 8; ++i) EXPECT_NEAR(neg.value()[i], b[i] * 2.0 / (2.0 + 1e-4), 1e-15);
}

TEST(WeightedFusion, Gradients) {
  std::mt19937_64 rng(12);
  const Tensor a = randn({2, 2, 2}, rng), b = randn({2, 2, 2}, rng);
  const Tensor w({2}, std::vector<double>{0.7, 1.3});
  EXPECT_LT(check([](auto v) { return weighted_fusion({v[0], v[1]}, v[2]); }, {a, b, w}).rel_err, kTol);
}

TEST(BiFpn, EqualWeightNodeAveragesResizedInputs) {
  ParamStore store;
  const BiFpnBlock blk = BiFpnBlock::create(store, "f", 3, 2, Activation::Mish, 1);
  std::mt19937_64 rng(13);
  const Tensor a = randn({2, 8, 8}, rng), b = randn({2, 4, 4}, rng);
  Binding bind(store, false);
  const Var fused = weighted_fusion({Var::constant(a), upsample2x(Var::constant(b))}, bind(blk.top_down[0].weights));
  const Var up = upsample2x(Var::constant(b));
  for (Index i = 0; i < fused.value().size(); ++i) {
    EXPECT_NEAR(fused.value()[i], (a[i] + up.value()[i]) / (2.0 + 1e-4), 1e-15);
  }
}

TEST(BiFpn, PreservesShapesForImageAndBevLevels) {
  ParamStore store;
  const BiFpn img = BiFpn::create(store, "img", 1, 5, 4, Activation::Mish, 1);
  const BiFpn bev = BiFpn::create(store, "bev", 1, 3, 4, Activation::Mish, 1);
  Binding bind(store, false);
  LevelSet in5, in3;
  const int hs[] = {48, 24, 12, 6, 3}, ws[] = {64, 32, 16, 8, 4};
  for (int i = 0; i < 5; ++i) in5.maps.push_back(Var::constant(Tensor({4, hs[i], ws[i]})));
  in5.strides = {8, 16, 32, 64, 128};
  // 3-row level is odd: the bottom-up path pools 6 -> 3 and 3 has no further level.
  const LevelSet o5 = img(bind, in5);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(o5[i].shape(), in5[i].shape());
  for (int s : {80, 40, 20}) in3.maps.push_back(Var::constant(Tensor({4, s, s})));
  in3.strides = {1, 2, 4};
  const LevelSet o3 = bev(bind, in3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(o3[i].shape(), in3[i].shape());
  EXPECT_THROW(bev(bind, in5), std::invalid_argument);
  EXPECT_THROW(BiFpnBlock::create(store, "x", 2, 4, Activation::Mish, 1), std::invalid_argument);
}

TEST(BiFpn, FourRepeatGradients) {
  ParamStore store;
  // Three channels: layer norm over two channels is degenerate (always +-1).
  const BiFpn f = BiFpn::create(store, "f", 4, 3, 3, Activation::Mish, 3);
  std::mt19937_64 rng(14);
  const std::vector<Tensor> inputs{randn({3, 4, 4}, rng), randn({3, 2, 2}, rng), randn({3, 1, 1}, rng)};
  const auto r = gradcheck::check_module(store, inputs, [&](Binding& bind, const std::vector<Var>& v) {
    const LevelSet out = f(bind, LevelSet{{v[0], v[1], v[2]}, {1, 2, 4}});
    return concat({reshape(out[0], {48}), reshape(out[1], {12}), reshape(out[2], {3})});
  });
  EXPECT_LT(r.rel_err, kTol) << r.worst;
}

TEST(Backbones, StrideContract) {
  ParamStore store;
  const ImageBackbone img = ImageBackbone::create(store, "camera.backbone", 3, 4, 1);
  const BevBackbone bev = BevBackbone::create(store, "radar.backbone", 10, 4, 1);
  Binding bind(store, false);
  const LevelSet p = img(bind, Var::constant(Tensor({3, 384, 512})));
  const int hs[] = {48, 24, 12, 6, 3}, ws[] = {64, 32, 16, 8, 4};
  ASSERT_EQ(p.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(p[i].shape(), (Shape{4, hs[i], ws[i]}));
    EXPECT_EQ(p.strides[static_cast<std::size_t>(i)], 8 << i);
  }
  const LevelSet p2 = img(bind, Var::constant(Tensor({3, 768, 1024})));
  for (int i = 0; i < 5; ++i) EXPECT_EQ(p2[i].shape(), (Shape{4, 2 * hs[i], 2 * ws[i]}));
  EXPECT_THROW(img(bind, Var::constant(Tensor({3, 100, 512}))), std::invalid_argument);
  const LevelSet b = bev(bind, Var::constant(Tensor({10, 80, 80})));
  EXPECT_EQ(b[0].shape(), (Shape{4, 80, 80}));
  EXPECT_EQ(b[1].shape(), (Shape{4, 40, 40}));
  EXPECT_EQ(b[2].shape(), (Shape{4, 20, 20}));
}

TEST(Backbones, Gradients) {
  ParamStore store;
  const BevBackbone bev = BevBackbone::create(store, "radar.backbone", 2, 3, 5);
  std::mt19937_64 rng(15);
  const auto r = gradcheck::check_module(store, {randn({2, 4, 4}, rng)}, [&](Binding& bind, const std::vector<Var>& v) {
    const LevelSet out = bev(bind, v[0]);
    return concat({reshape(out[0], {48}), reshape(out[1], {12}), reshape(out[2], {3})});
  });
  EXPECT_LT(r.rel_err, kTol) << r.worst;
}

TEST(Xavier, DeterministicWithGlorotVariance) {
  EXPECT_EQ(xavier_init({10, 20}, 4), xavier_init({10, 20}, 4));
  EXPECT_NE(xavier_init({10, 20}, 4), xavier_init({10, 20}, 5));
  const Tensor t = xavier_init({100, 100}, 42);
  double mu = 0, var = 0;
  for (double v : t.values()) mu += v / 1e4;
  for (double v : t.values()) var += (v - mu) * (v - mu) / 1e4;
  EXPECT_NEAR(var / (2.0 / 200.0), 1.0, 0.05);
  EXPECT_THROW(xavier_init({0, 3}, 1), std::invalid_argument);
  EXPECT_THROW(xavier_init({}, 1), std::invalid_argument);
}

TEST(Binding, SharedParameterAccumulatesOnce) {
  ParamStore store;
  store.add("w", Tensor({2}, std::vector<double>{2.0, 3.0}));
  Binding bind(store);
  const Var x = Var::constant(Tensor({2}, std::vector<double>{1.0, 1.0}));
  const Var y = sum(add(mul(bind("w"), x), mul(bind("w"), x)));
  backward(y);
  GradStore g = zero_grads(store);
  bind.accumulate(g);
  EXPECT_EQ(g[0][0], 2.0);
  EXPECT_EQ(g[0][1], 2.0);
  Binding frozen(store, true, [](const std::string&) { return false; });
  EXPECT_FALSE(frozen("w").requires_grad());
}

TEST(Checkpoint, RoundTripAndDeterministicBytes) {
  ParamStore store;
  BevBackbone::create(store, "radar.backbone", 3, 4, 9);
  const auto dir = std::filesystem::temp_directory_path() / "cdsm_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(store, dir / "a.bin");
  save_checkpoint(store, dir / "b.bin");
  const ParamStore back = load_checkpoint(dir / "a.bin");
  ASSERT_EQ(back.size(), store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    EXPECT_EQ(back[i].name, store[i].name);
    EXPECT_EQ(back[i].value, store[i].value);
  }
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  EXPECT_EQ(bytes(dir / "a.bin"), bytes(dir / "b.bin"));
  std::ofstream(dir / "bad.bin") << "NOTACKPT";
  EXPECT_THROW(load_checkpoint(dir / "bad.bin"), CheckpointError);
  std::string trunc = bytes(dir / "a.bin").substr(0, 40);
  std::ofstream(dir / "trunc.bin", std::ios::binary) << trunc;
  EXPECT_THROW(load_checkpoint(dir / "trunc.bin"), CheckpointError);
  std::filesystem::remove_all(dir);
}
