// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdsm/nn/ops.hpp"
#include "cdsm/nn/params.hpp"

namespace cdsm::nn {

enum class Activation { None, LeakyRelu, Mish };

inline Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::LeakyRelu:
      return leaky_relu(x, 0.1);
    case Activation::Mish:
      return mish(x);
    case Activation::None:
      break;
  }
  return x;
}

/// Ordered feature maps with their downsampling factor relative to the
/// network input (pixels for image levels, meters per cell for BEV levels).
struct LevelSet {
  std::vector<Var> maps;
  std::vector<int> strides;

  std::size_t size() const { return maps.size(); }
  const Var& operator[](std::size_t i) const { return maps[i]; }
};

struct Conv2d {
  std::string weight;
  std::string bias;  // empty when bias-free
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  static Conv2d create(ParamStore& store, const std::string& name, int cin, int cout, int kernel, int stride,
                       std::uint64_t seed, bool with_bias = true, int pad = -1) {
    Conv2d c;
    c.weight = name + ".w";
    c.in_channels = cin;
    c.out_channels = cout;
    c.kernel = kernel;
    c.stride = stride;
    c.pad = pad >= 0 ? pad : (kernel - 1) / 2;
    store.add(c.weight, xavier_init({cout, cin, kernel, kernel}, param_seed(seed, c.weight)));
    if (with_bias) {
      c.bias = name + ".b";
      store.add(c.bias, Tensor(Shape{cout}));
    }
    return c;
  }

  Var operator()(Binding& bind, const Var& x) const {
    return conv2d(x, bind(weight), bias.empty() ? Var() : bind(bias), stride, pad);
  }
};

struct LayerNorm {
  std::string gamma;
  std::string beta;

  static LayerNorm create(ParamStore& store, const std::string& name, int channels) {
    LayerNorm ln{name + ".g", name + ".b"};
    store.add(ln.gamma, Tensor(Shape{channels}, 1.0));
    store.add(ln.beta, Tensor(Shape{channels}, 0.0));
    return ln;
  }

  Var operator()(Binding& bind, const Var& x) const { return layer_norm(x, bind(gamma), bind(beta)); }
};

/// conv -> layer norm -> activation.
struct ConvBlock {
  Conv2d conv;
  LayerNorm norm;
  Activation act = Activation::LeakyRelu;

  static ConvBlock create(ParamStore& store, const std::string& name, int cin, int cout, int kernel, int stride,
                          Activation act, std::uint64_t seed, bool with_bias = true) {
    return {Conv2d::create(store, name + ".conv", cin, cout, kernel, stride, seed, with_bias),
            LayerNorm::create(store, name + ".ln", cout), act};
  }

  Var operator()(Binding& bind, const Var& x) const { return activate(norm(bind, conv(bind, x)), act); }
};

// ---------------------------------------------------------------------------
// Weighted bi-directional feature pyramid

struct FusionNode {
  std::string weights;  // one raw weight per input
  ConvBlock block;
  int inputs = 2;

  Var operator()(Binding& bind, const std::vector<Var>& xs) const {
    return block(bind, weighted_fusion(xs, bind(weights)));
  }
};

/// One top-down + bottom-up pass over L >= 3 equally wide levels. Adjacent
/// levels differ by an exact factor of two in each spatial dimension.
struct BiFpnBlock {
  std::vector<FusionNode> top_down;   // index i for level i, i in [0, L-2]
  std::vector<FusionNode> bottom_up;  // index i for level i, i in [1, L-1]
  int levels = 0;
  int channels = 0;

  static BiFpnBlock create(ParamStore& store, const std::string& name, int levels, int channels, Activation act,
                           std::uint64_t seed) {
    if (levels < 3) {
      throw std::invalid_argument("BiFpnBlock: need at least 3 levels, got " + std::to_string(levels));
    }
    BiFpnBlock b;
    b.levels = levels;
    b.channels = channels;
    b.top_down.resize(static_cast<std::size_t>(levels));
    b.bottom_up.resize(static_cast<std::size_t>(levels));
    auto make = [&](const std::string& node, int n_in) {
      FusionNode f;
      f.inputs = n_in;
      f.weights = name + "." + node + ".fw";
      store.add(f.weights, Tensor(Shape{n_in}, 1.0));
      f.block = ConvBlock::create(store, name + "." + node, channels, channels, 3, 1, act, seed);
      return f;
    };
    for (int i = levels - 2; i >= 0; --i) {
      b.top_down[static_cast<std::size_t>(i)] = make("td" + std::to_string(i), 2);
    }
    for (int i = 1; i < levels; ++i) {
      b.bottom_up[static_cast<std::size_t>(i)] = make("bu" + std::to_string(i), i == levels - 1 ? 2 : 3);
    }
    return b;
  }

  LevelSet operator()(Binding& bind, const LevelSet& in) const {
    if (static_cast<int>(in.size()) != levels) {
      throw std::invalid_argument("BiFpnBlock: expected " + std::to_string(levels) + " levels, got " +
                                  std::to_string(in.size()));
    }
    const auto L = static_cast<std::size_t>(levels);
    std::vector<Var> td(L);
    td[L - 1] = in[L - 1];
    for (std::size_t i = L - 1; i-- > 0;) {
      td[i] = top_down[i](bind, {in[i], upsample2x(td[i + 1])});
    }
    LevelSet out{std::vector<Var>(L), in.strides};
    out.maps[0] = td[0];
    for (std::size_t i = 1; i < L; ++i) {
      const Var down = avg_pool2x(out.maps[i - 1]);
      out.maps[i] = (i == L - 1) ? bottom_up[i](bind, {in[i], down}) : bottom_up[i](bind, {in[i], td[i], down});
    }
    return out;
  }
};

struct BiFpn {
  std::vector<BiFpnBlock> blocks;

  static BiFpn create(ParamStore& store, const std::string& name, int repeats, int levels, int channels,
                      Activation act, std::uint64_t seed) {
    BiFpn f;
    for (int r = 0; r < repeats; ++r) {
      f.blocks.push_back(BiFpnBlock::create(store, name + ".r" + std::to_string(r), levels, channels, act, seed));
    }
    return f;
  }

  LevelSet operator()(Binding& bind, LevelSet x) const {
    for (const auto& b : blocks) {
      x = b(bind, x);
    }
    return x;
  }
};

// ---------------------------------------------------------------------------
// Toy backbones

/// Patchify stem (4x4, stride 4) followed by stride-2 stages producing
/// P3..P7 at strides 8..128. Input height and width must divide by 128.
struct ImageBackbone {
  ConvBlock stem;
  std::vector<ConvBlock> stages;  // P3, P4, P5, P6, P7
  int channels = 0;

  static constexpr int kMaxStride = 128;

  static ImageBackbone create(ParamStore& store, const std::string& name, int in_channels, int channels,
                              std::uint64_t seed) {
    ImageBackbone b;
    b.channels = channels;
    b.stem = {Conv2d::create(store, name + ".stem.conv", in_channels, channels, 4, 4, seed, true, 0),
              LayerNorm::create(store, name + ".stem.ln", channels), Activation::LeakyRelu};
    for (int p = 3; p <= 7; ++p) {
      b.stages.push_back(ConvBlock::create(store, name + ".p" + std::to_string(p), channels, channels, 3, 2,
                                           Activation::LeakyRelu, seed));
    }
    return b;
  }

  static void check_input(Index height, Index width) {
    if (height <= 0 || width <= 0 || height % kMaxStride != 0 || width % kMaxStride != 0) {
      throw std::invalid_argument("ImageBackbone: input " + std::to_string(width) + "x" + std::to_string(height) +
                                  " is not divisible by stride " + std::to_string(kMaxStride));
    }
  }

  LevelSet operator()(Binding& bind, const Var& image) const {
    check_input(image.dim(1), image.dim(2));
    LevelSet out;
    Var x = stem(bind, image);
    int stride = 4;
    for (const auto& s : stages) {
      x = s(bind, x);
      stride *= 2;
      out.maps.push_back(x);
      out.strides.push_back(stride);
    }
    return out;
  }
};

/// BEV backbone: 1x1 channel compression, then L1 (stride 1), L2 and L3
/// (stride 2 each). Grid sides must divide by 4.
struct BevBackbone {
  ConvBlock compress;
  ConvBlock l1;
  ConvBlock l2;
  ConvBlock l3;

  static BevBackbone create(ParamStore& store, const std::string& name, int in_channels, int channels,
                            std::uint64_t seed) {
    return {ConvBlock::create(store, name + ".compress", in_channels, channels, 1, 1, Activation::LeakyRelu, seed),
            ConvBlock::create(store, name + ".l1", channels, channels, 3, 1, Activation::LeakyRelu, seed),
            ConvBlock::create(store, name + ".l2", channels, channels, 3, 2, Activation::LeakyRelu, seed),
            ConvBlock::create(store, name + ".l3", channels, channels, 3, 2, Activation::LeakyRelu, seed)};
  }

  LevelSet operator()(Binding& bind, const Var& grid) const {
    if (grid.dim(1) % 4 != 0 || grid.dim(2) % 4 != 0) {
      throw std::invalid_argument("BevBackbone: grid " + shape_str(grid.shape()) + " is not divisible by 4");
    }
    const Var a = l1(bind, compress(bind, grid));
    const Var b = l2(bind, a);
    const Var c = l3(bind, b);
    return {{a, b, c}, {1, 2, 4}};
  }
};

}  // namespace cdsm::nn
