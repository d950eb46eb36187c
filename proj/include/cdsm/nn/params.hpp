// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cdsm/nn/autograd.hpp"
#include "cdsm/tensor.hpp"

namespace cdsm::nn {

struct Param {
  std::string name;
  Tensor value;
};

/// Named parameter arrays in insertion order.
class ParamStore {
 public:
  Param& add(std::string name, Tensor value) {
    if (index_.count(name) != 0) {
      throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    }
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(value)});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
    }
    return it->second;
  }

  Param& get(const std::string& name) { return params_[index_of(name)]; }
  const Param& get(const std::string& name) const { return params_[index_of(name)]; }

  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  Index scalar_count() const {
    Index n = 0;
    for (const Param& p : params_) {
      n += p.value.size();
    }
    return n;
  }

  /// Copies values of every parameter in `other` whose name starts with
  /// `prefix` and that exists here with the same shape. Returns the count.
  std::size_t load_matching(const ParamStore& other, std::string_view prefix = "") {
    std::size_t n = 0;
    for (const Param& p : other) {
      if (p.name.compare(0, prefix.size(), prefix) != 0 || !contains(p.name)) {
        continue;
      }
      Param& mine = get(p.name);
      if (mine.value.shape() != p.value.shape()) {
        throw std::invalid_argument("load_matching: shape mismatch for '" + p.name + "': " +
                                    shape_str(mine.value.shape()) + " vs " + shape_str(p.value.shape()));
      }
      mine.value = p.value;
      ++n;
    }
    return n;
  }

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

using GradStore = std::vector<Tensor>;

inline GradStore zero_grads(const ParamStore& store) {
  GradStore g;
  g.reserve(store.size());
  for (const Param& p : store) {
    g.emplace_back(p.value.shape());
  }
  return g;
}

using TrainablePredicate = std::function<bool(const std::string&)>;

/// Binds parameters into one forward pass. Each parameter is bound at most
/// once per pass, so shared layers accumulate into a single leaf.
class Binding {
 public:
  explicit Binding(const ParamStore& store, bool with_grad = true, TrainablePredicate trainable = {})
      : store_(&store), with_grad_(with_grad), trainable_(std::move(trainable)) {}

  Var operator()(const std::string& name) {
    const std::size_t i = store_->index_of(name);
    auto it = bound_.find(i);
    if (it != bound_.end()) {
      return it->second;
    }
    const bool rg = with_grad_ && (!trainable_ || trainable_(name));
    Var v = Var::leaf((*store_)[i].value, rg);
    bound_.emplace(i, v);
    return v;
  }

  void accumulate(GradStore& grads) const {
    for (const auto& [i, v] : bound_) {
      if (!v.requires_grad() || !v.node()->has_grad()) {
        continue;
      }
      Tensor& g = grads[i];
      const Tensor& src = v.node()->grad;
      for (Index k = 0; k < g.size(); ++k) {
        g[k] += src[k];
      }
    }
  }

 private:
  const ParamStore* store_;
  bool with_grad_;
  TrainablePredicate trainable_;
  std::unordered_map<std::size_t, Var> bound_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Glorot-uniform values: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
/// For rank-4 conv weights [out, in, k, k] the receptive field scales both
/// fans; rank-2 weights are [in, out].
inline Tensor xavier_init(const Shape& shape, std::uint64_t seed) {
  if (shape.empty() || numel(shape) == 0) {
    throw std::invalid_argument("xavier_init: zero-size shape " + shape_str(shape));
  }
  double fan_in = 0.0, fan_out = 0.0;
  if (shape.size() == 1) {
    fan_in = fan_out = static_cast<double>(shape[0]);
  } else if (shape.size() == 2) {
    fan_in = static_cast<double>(shape[0]);
    fan_out = static_cast<double>(shape[1]);
  } else {
    const double rf = static_cast<double>(numel(Shape(shape.begin() + 2, shape.end())));
    fan_out = static_cast<double>(shape[0]) * rf;
    fan_in = static_cast<double>(shape[1]) * rf;
  }
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor t(shape);
  for (double& v : t.values()) {
    v = dist(rng);
  }
  return t;
}

inline std::uint64_t param_seed(std::uint64_t seed, std::string_view name) { return splitmix64(seed ^ fnv1a(name)); }

}  // namespace cdsm::nn
