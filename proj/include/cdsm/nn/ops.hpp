// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operators. Spatial feature maps are CHW tensors without a
// batch axis; batching happens by accumulating per-sample gradients.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdsm/nn/autograd.hpp"
#include "cdsm/tensor.hpp"

namespace cdsm::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace detail {

inline void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_str(x.shape()));
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (Index i = 0; i < out.size(); ++i) {
    out[i] += b.value()[i];
  }
  auto pa = a.shared();
  auto pb = b.shared();
  return make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (Index i = 0; i < g.size(); ++i) {
          g[i] += self.grad[i];
        }
      }
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (Index i = 0; i < out.size(); ++i) {
    out[i] *= b.value()[i];
  }
  auto pa = a.shared();
  auto pb = b.shared();
  return make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) {
        g[i] += self.grad[i] * pb->value[i];
      }
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) {
        g[i] += self.grad[i] * pa->value[i];
      }
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) {
    v *= s;
  }
  auto pa = a.shared();
  return make_op(std::move(out), {a}, [pa, s](Node& self) {
    Tensor& g = pa->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) {
      g[i] += s * self.grad[i];
    }
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  auto pa = a.shared();
  return make_op(std::move(out), {a}, [pa](Node& self) {
    Tensor& g = pa->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i];
    }
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) {
    s += v;
  }
  auto pa = a.shared();
  return make_op(Tensor(Shape{}, s), {a}, [pa](Node& self) {
    Tensor& g = pa->grad_buffer();
    const double d = self.grad[0];
    for (double& v : g.values()) {
      v += d;
    }
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(std::max<Index>(1, a.value().size()))); }

inline Var leaky_relu(const Var& x, double slope = 0.1) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    v = v > 0.0 ? v : slope * v;
  }
  auto px = x.shared();
  return make_op(std::move(out), {x}, [px, slope](Node& self) {
    Tensor& g = px->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * (px->value[i] > 0.0 ? 1.0 : slope);
    }
  });
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double mish_scalar(double x) { return x * std::tanh(softplus(x)); }

/// mish(x) = x * tanh(softplus(x)).
inline Var mish(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    v = mish_scalar(v);
  }
  auto px = x.shared();
  return make_op(std::move(out), {x}, [px](Node& self) {
    Tensor& g = px->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) {
      const double v = px->value[i];
      const double t = std::tanh(softplus(v));
      g[i] += self.grad[i] * (t + v * (1.0 - t * t) * sigmoid_scalar(v));
    }
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    v = sigmoid_scalar(v);
  }
  auto px = x.shared();
  // The output node is needed in backward; capture its value by copy.
  Tensor y = out;
  return make_op(std::move(out), {x}, [px, y = std::move(y)](Node& self) {
    Tensor& g = px->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

inline void im2col(const double* x, Index C, Index H, Index W, int k, int stride, int pad, Index Ho, Index Wo,
                   double* cols) {
  const Index plane = Ho * Wo;
  for (Index c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          double* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + iy) * W;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, Index C, Index H, Index W, int k, int stride, int pad, Index Ho, Index Wo,
                   double* x) {
  const Index plane = Ho * Wo;
  for (Index c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            continue;
          }
          double* dst = x + (c * H + iy) * W;
          const double* src = row + oy * Wo;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) {
              dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Index conv_out_size(Index n, int k, int stride, int pad) { return (n + 2 * pad - k) / stride + 1; }

/// 2-D cross-correlation. x: [Ci,H,W], w: [Co,Ci,k,k], b: [Co] or undefined.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  detail::require_rank(x, 3, "conv2d input");
  detail::require_rank(w, 4, "conv2d weight");
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const Index Co = w.dim(0);
  const int k = static_cast<int>(w.dim(2));
  if (w.dim(1) != C || w.dim(3) != k) {
    throw std::invalid_argument("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                                shape_str(x.shape()));
  }
  if (b.defined() && (b.value().rank() != 1 || b.dim(0) != Co)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape()));
  }
  const Index Ho = conv_out_size(H, k, stride, pad);
  const Index Wo = conv_out_size(W, k, stride, pad);
  if (Ho <= 0 || Wo <= 0) {
    throw std::invalid_argument("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                                std::to_string(k));
  }
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  const Index K = C * k * k;
  const Index P = Ho * Wo;

  Storage cols;
  const double* colp = x.value().data();
  if (!direct) {
    cols.resize(static_cast<std::size_t>(K * P));
    detail::im2col(x.value().data(), C, H, W, k, stride, pad, Ho, Wo, cols.data());
    colp = cols.data();
  }
  Tensor out(Shape{Co, Ho, Wo});
  MatMap y(out.data(), Co, P);
  ConstMatMap wm(w.value().data(), Co, K);
  ConstMatMap cm(colp, K, P);
  y.noalias() = wm * cm;
  if (b.defined()) {
    for (Index o = 0; o < Co; ++o) {
      y.row(o).array() += b.value()[o];
    }
  }

  auto px = x.shared();
  auto pw = w.shared();
  std::shared_ptr<Node> pb = b.defined() ? b.shared() : nullptr;
  std::vector<Var> parents = {x, w};
  if (b.defined()) {
    parents.push_back(b);
  }
  return make_op(std::move(out), std::move(parents), [=](Node& self) {
    ConstMatMap dy(self.grad.data(), Co, P);
    Storage cols_b;
    const double* cp = px->value.data();
    if (!direct && pw->requires_grad) {
      cols_b.resize(static_cast<std::size_t>(K * P));
      detail::im2col(px->value.data(), C, H, W, k, stride, pad, Ho, Wo, cols_b.data());
      cp = cols_b.data();
    }
    if (pw->requires_grad) {
      MatMap dw(pw->grad_buffer().data(), Co, K);
      dw.noalias() += dy * ConstMatMap(cp, K, P).transpose();
    }
    if (pb && pb->requires_grad) {
      Tensor& db = pb->grad_buffer();
      for (Index o = 0; o < Co; ++o) {
        db[o] += dy.row(o).sum();
      }
    }
    if (px->requires_grad) {
      ConstMatMap wmb(pw->value.data(), Co, K);
      if (direct) {
        MatMap dx(px->grad_buffer().data(), K, P);
        dx.noalias() += wmb.transpose() * dy;
      } else {
        RowMat dcols = wmb.transpose() * dy;
        detail::col2im(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, px->grad_buffer().data());
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Normalizes over the channel axis at every spatial location of a CHW map,
/// then applies per-channel scale and shift. eps guards zero variance.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  detail::require_rank(x, 3, "layer_norm");
  const Index C = x.dim(0);
  const Index N = x.dim(1) * x.dim(2);
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw std::invalid_argument("layer_norm: affine params must have " + std::to_string(C) + " entries");
  }
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C * N));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N));
  const double* xv = x.value().data();
  for (Index n = 0; n < N; ++n) {
    double mu = 0.0;
    for (Index c = 0; c < C; ++c) {
      mu += xv[c * N + n];
    }
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (Index c = 0; c < C; ++c) {
      const double d = xv[c * N + n] - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[n] = is;
    for (Index c = 0; c < C; ++c) {
      const double h = (xv[c * N + n] - mu) * is;
      (*xhat)[c * N + n] = h;
      out[c * N + n] = gamma.value()[c] * h + beta.value()[c];
    }
  }
  auto px = x.shared();
  auto pg = gamma.shared();
  auto pb = beta.shared();
  return make_op(std::move(out), {x, gamma, beta}, [=](Node& self) {
    const Tensor& dy = self.grad;
    if (pg->requires_grad || pb->requires_grad) {
      Tensor& dg = pg->grad_buffer();
      Tensor& db = pb->grad_buffer();
      for (Index c = 0; c < C; ++c) {
        double sg = 0.0, sb = 0.0;
        for (Index n = 0; n < N; ++n) {
          sg += dy[c * N + n] * (*xhat)[c * N + n];
          sb += dy[c * N + n];
        }
        dg[c] += sg;
        db[c] += sb;
      }
    }
    if (px->requires_grad) {
      Tensor& dx = px->grad_buffer();
      for (Index n = 0; n < N; ++n) {
        double s1 = 0.0, s2 = 0.0;
        for (Index c = 0; c < C; ++c) {
          const double dh = dy[c * N + n] * pg->value[c];
          s1 += dh;
          s2 += dh * (*xhat)[c * N + n];
        }
        const double is = (*inv_std)[n];
        for (Index c = 0; c < C; ++c) {
          const double dh = dy[c * N + n] * pg->value[c];
          dx[c * N + n] += is / static_cast<double>(C) *
                           (static_cast<double>(C) * dh - s1 - (*xhat)[c * N + n] * s2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling and layout

/// Nearest-neighbor 2x upsampling of a CHW map.
inline Var upsample2x(const Var& x) {
  detail::require_rank(x, 3, "upsample2x");
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out(Shape{C, 2 * H, 2 * W});
  for (Index c = 0; c < C; ++c) {
    for (Index y = 0; y < 2 * H; ++y) {
      for (Index z = 0; z < 2 * W; ++z) {
        out.at3(c, y, z) = x.value().at3(c, y / 2, z / 2);
      }
    }
  }
  auto px = x.shared();
  return make_op(std::move(out), {x}, [px, C, H, W](Node& self) {
    Tensor& g = px->grad_buffer();
    for (Index c = 0; c < C; ++c) {
      for (Index y = 0; y < 2 * H; ++y) {
        for (Index z = 0; z < 2 * W; ++z) {
          g.at3(c, y / 2, z / 2) += self.grad.at3(c, y, z);
        }
      }
    }
  });
}

/// 2x2 average pooling with stride 2; spatial sizes must be even.
inline Var avg_pool2x(const Var& x) {
  detail::require_rank(x, 3, "avg_pool2x");
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % 2 != 0 || W % 2 != 0) {
    throw std::invalid_argument("avg_pool2x: spatial size " + shape_str(x.shape()) + " is not even");
  }
  Tensor out(Shape{C, H / 2, W / 2});
  for (Index c = 0; c < C; ++c) {
    for (Index y = 0; y < H; ++y) {
      for (Index z = 0; z < W; ++z) {
        out.at3(c, y / 2, z / 2) += 0.25 * x.value().at3(c, y, z);
      }
    }
  }
  auto px = x.shared();
  return make_op(std::move(out), {x}, [px, C, H, W](Node& self) {
    Tensor& g = px->grad_buffer();
    for (Index c = 0; c < C; ++c) {
      for (Index y = 0; y < H; ++y) {
        for (Index z = 0; z < W; ++z) {
          g.at3(c, y, z) += 0.25 * self.grad.at3(c, y / 2, z / 2);
        }
      }
    }
  });
}

/// Concatenates along axis 0; trailing dimensions must agree.
inline Var concat(const std::vector<Var>& xs) {
  if (xs.empty()) {
    throw std::invalid_argument("concat: no inputs");
  }
  Shape tail(xs[0].shape().begin() + (xs[0].value().rank() ? 1 : 0), xs[0].shape().end());
  Index lead = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Shape& s = xs[i].shape();
    if (s.empty() || Shape(s.begin() + 1, s.end()) != tail) {
      throw std::invalid_argument("concat: input " + std::to_string(i) + " shape " + shape_str(s) +
                                  " incompatible with " + shape_str(xs[0].shape()));
    }
    lead += s[0];
  }
  Shape shape = tail;
  shape.insert(shape.begin(), lead);
  Tensor out(shape);
  Index off = 0;
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<Index> offsets;
  for (const Var& x : xs) {
    std::copy(x.value().data(), x.value().data() + x.value().size(), out.data() + off);
    nodes.push_back(x.shared());
    offsets.push_back(off);
    off += x.value().size();
  }
  return make_op(std::move(out), xs, [nodes, offsets](Node& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (!nodes[i]->requires_grad) {
        continue;
      }
      Tensor& g = nodes[i]->grad_buffer();
      for (Index j = 0; j < g.size(); ++j) {
        g[j] += self.grad[offsets[i] + j];
      }
    }
  });
}

/// out[i] = x[source[i]], or 0 where source[i] < 0. Backward scatters.
inline Var gather(const Var& x, std::shared_ptr<const std::vector<Index>> source, Shape out_shape) {
  if (static_cast<Index>(source->size()) != numel(out_shape)) {
    throw std::invalid_argument("gather: index map size does not match output shape " + shape_str(out_shape));
  }
  Tensor out(std::move(out_shape));
  const Index n_in = x.value().size();
  for (Index i = 0; i < out.size(); ++i) {
    const Index s = (*source)[static_cast<std::size_t>(i)];
    if (s >= n_in) {
      throw std::out_of_range("gather: source index out of range");
    }
    out[i] = s >= 0 ? x.value()[s] : 0.0;
  }
  auto px = x.shared();
  return make_op(std::move(out), {x}, [px, source](Node& self) {
    Tensor& g = px->grad_buffer();
    for (Index i = 0; i < self.grad.size(); ++i) {
      const Index s = (*source)[static_cast<std::size_t>(i)];
      if (s >= 0) {
        g[s] += self.grad[i];
      }
    }
  });
}

/// Max over one axis; the axis is removed from the output shape.
inline Var max_axis(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw std::invalid_argument("max_axis: axis out of range");
  }
  Index outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) {
    outer *= s[i];
  }
  for (std::size_t i = axis + 1; i < s.size(); ++i) {
    inner *= s[i];
  }
  const Index n = s[axis];
  if (n == 0) {
    throw std::invalid_argument("max_axis: empty axis");
  }
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(os);
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      Index best = (o * n) * inner + i;
      for (Index j = 1; j < n; ++j) {
        const Index idx = (o * n + j) * inner + i;
        if (x.value()[idx] > x.value()[best]) {
          best = idx;
        }
      }
      out[o * inner + i] = x.value()[best];
      (*arg)[static_cast<std::size_t>(o * inner + i)] = best;
    }
  }
  auto px = x.shared();
  return make_op(std::move(out), {x}, [px, arg](Node& self) {
    Tensor& g = px->grad_buffer();
    for (Index i = 0; i < self.grad.size(); ++i) {
      g[(*arg)[static_cast<std::size_t>(i)]] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul lhs");
  detail::require_rank(b, 2, "matmul rhs");
  const Index n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{n, m});
  MatMap(out.data(), n, m).noalias() = ConstMatMap(a.value().data(), n, k) * ConstMatMap(b.value().data(), k, m);
  auto pa = a.shared();
  auto pb = b.shared();
  return make_op(std::move(out), {a, b}, [pa, pb, n, k, m](Node& self) {
    ConstMatMap dy(self.grad.data(), n, m);
    if (pa->requires_grad) {
      MatMap(pa->grad_buffer().data(), n, k).noalias() += dy * ConstMatMap(pb->value.data(), k, m).transpose();
    }
    if (pb->requires_grad) {
      MatMap(pb->grad_buffer().data(), k, m).noalias() += ConstMatMap(pa->value.data(), n, k).transpose() * dy;
    }
  });
}

/// a[n,m] + bias[m] broadcast over rows.
inline Var add_row_bias(const Var& a, const Var& bias) {
  detail::require_rank(a, 2, "add_row_bias");
  const Index n = a.dim(0), m = a.dim(1);
  if (bias.value().size() != m) {
    throw std::invalid_argument("add_row_bias: bias size mismatch");
  }
  Tensor out = a.value();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) {
      out[i * m + j] += bias.value()[j];
    }
  }
  auto pa = a.shared();
  auto pb = bias.shared();
  return make_op(std::move(out), {a, bias}, [pa, pb, n, m](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) {
        g[i] += self.grad[i];
      }
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < m; ++j) {
          g[j] += self.grad[i * m + j];
        }
      }
    }
  });
}

/// x: [G*P, F] rows grouped in blocks of P; max over the first counts[g]
/// rows of each block. Padding rows never contribute.
inline Var masked_group_max(const Var& x, const std::vector<int>& counts, Index P) {
  detail::require_rank(x, 2, "masked_group_max");
  const Index G = static_cast<Index>(counts.size());
  const Index F = x.dim(1);
  if (x.dim(0) != G * P) {
    throw std::invalid_argument("masked_group_max: expected " + std::to_string(G * P) + " rows");
  }
  Tensor out(Shape{G, F});
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(G * F));
  for (Index g = 0; g < G; ++g) {
    const int n = counts[static_cast<std::size_t>(g)];
    if (n < 1 || n > P) {
      throw std::invalid_argument("masked_group_max: group " + std::to_string(g) + " has " + std::to_string(n) +
                                  " valid rows");
    }
    for (Index f = 0; f < F; ++f) {
      Index best = (g * P) * F + f;
      for (Index r = 1; r < n; ++r) {
        const Index idx = (g * P + r) * F + f;
        if (x.value()[idx] > x.value()[best]) {
          best = idx;
        }
      }
      out[g * F + f] = x.value()[best];
      (*arg)[static_cast<std::size_t>(g * F + f)] = best;
    }
  }
  auto px = x.shared();
  return make_op(std::move(out), {x}, [px, arg](Node& self) {
    Tensor& gr = px->grad_buffer();
    for (Index i = 0; i < self.grad.size(); ++i) {
      gr[(*arg)[static_cast<std::size_t>(i)]] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Fusion

/// Fast normalized fusion: sum_i relu(w_i) * x_i / (eps + sum_j relu(w_j)).
inline Var weighted_fusion(const std::vector<Var>& xs, const Var& weights, double eps = 1e-4) {
  const std::size_t n = xs.size();
  if (n == 0 || static_cast<std::size_t>(weights.value().size()) != n) {
    throw std::invalid_argument("weighted_fusion: need one weight per input");
  }
  for (const Var& x : xs) {
    require_same_shape(x.value(), xs[0].value(), "weighted_fusion");
  }
  std::vector<double> w(n);
  double denom = eps;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::max(0.0, weights.value()[static_cast<Index>(i)]);
    denom += w[i];
  }
  Tensor out(xs[0].shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double c = w[i] / denom;
    for (Index j = 0; j < out.size(); ++j) {
      out[j] += c * xs[i].value()[j];
    }
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const Var& x : xs) {
    nodes.push_back(x.shared());
  }
  auto pw = weights.shared();
  std::vector<Var> parents = xs;
  parents.push_back(weights);
  Tensor y = out;
  return make_op(std::move(out), std::move(parents), [nodes, pw, w, denom, y = std::move(y)](Node& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) {
        Tensor& g = nodes[i]->grad_buffer();
        const double c = w[i] / denom;
        for (Index j = 0; j < g.size(); ++j) {
          g[j] += c * self.grad[j];
        }
      }
    }
    if (pw->requires_grad) {
      Tensor& gw = pw->grad_buffer();
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (pw->value[static_cast<Index>(i)] <= 0.0) {
          continue;
        }
        double s = 0.0;
        for (Index j = 0; j < self.grad.size(); ++j) {
          s += self.grad[j] * (nodes[i]->value[j] - y[j]);
        }
        gw[static_cast<Index>(i)] += s / denom;
      }
    }
  });
}

}  // namespace cdsm::nn
