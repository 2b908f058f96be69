#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "fewshot/errors.hpp"
#include "fewshot/params.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

// Handle to a node on a Graph tape. Plain index; only valid for the graph
// that created it.
struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

// Unfolds one image [C,H,W] into columns [C*9, Ho*Wo] for a 3x3 kernel.
template <typename T>
void im2col_3x3(const T* x, size_t C, size_t H, size_t W, size_t Ho, size_t Wo, size_t stride,
                size_t pad, T* col) {
  const size_t plane = H * W;
  const size_t out_plane = Ho * Wo;
  for (size_t c = 0; c < C; ++c) {
    for (size_t ky = 0; ky < 3; ++ky) {
      for (size_t kx = 0; kx < 3; ++kx) {
        T* dst = col + ((c * 3 + ky) * 3 + kx) * out_plane;
        const T* src = x + c * plane;
        for (size_t oy = 0; oy < Ho; ++oy) {
          const long iy = long(oy * stride + ky) - long(pad);
          if (iy < 0 || iy >= long(H)) {
            std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, T(0));
            continue;
          }
          const T* row = src + size_t(iy) * W;
          for (size_t ox = 0; ox < Wo; ++ox) {
            const long ix = long(ox * stride + kx) - long(pad);
            dst[oy * Wo + ox] = (ix < 0 || ix >= long(W)) ? T(0) : row[size_t(ix)];
          }
        }
      }
    }
  }
}

// Transpose of im2col_3x3: scatters column gradients back into the image.
template <typename T>
void col2im_add_3x3(const T* col, size_t C, size_t H, size_t W, size_t Ho, size_t Wo,
                    size_t stride, size_t pad, T* gx) {
  const size_t plane = H * W;
  const size_t out_plane = Ho * Wo;
  for (size_t c = 0; c < C; ++c) {
    for (size_t ky = 0; ky < 3; ++ky) {
      for (size_t kx = 0; kx < 3; ++kx) {
        const T* src = col + ((c * 3 + ky) * 3 + kx) * out_plane;
        T* dst = gx + c * plane;
        for (size_t oy = 0; oy < Ho; ++oy) {
          const long iy = long(oy * stride + ky) - long(pad);
          if (iy < 0 || iy >= long(H)) continue;
          T* row = dst + size_t(iy) * W;
          for (size_t ox = 0; ox < Wo; ++ox) {
            const long ix = long(ox * stride + kx) - long(pad);
            if (ix >= 0 && ix < long(W)) row[size_t(ix)] += src[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Reverse-mode autodiff tape. One Graph models one forward pass: build ops,
// call backward() on a scalar once, read gradients. Creation order is the
// topological order, so the backward sweep is a simple reverse scan.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves ----

  Var constant(Tensor<T> v) { return push(std::move(v), false, nullptr, {}); }

  Var input(Tensor<T> v, bool needs_grad = false) {
    return push(std::move(v), needs_grad, nullptr, {});
  }

  // Snapshot of a parameter; after backward() the node gradient is added
  // into p.grad. Registering the same parameter twice on one tape is legal
  // and accumulates both contributions.
  Var param(Parameter<T>& p) { return push(p.value, true, &p, {}); }

  // ---- inspection ----

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const std::vector<size_t>& shape(Var v) const { return node(v).value.shape(); }

  // Gradient of the backward root w.r.t. this node. Empty tensor if the node
  // did not participate.
  const Tensor<T>& grad(Var v) const { return node(v).grad; }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise / broadcast binary ops ----
  // The second operand must have the same shape as the first or a shape that
  // is a suffix of it (scalar = empty suffix); it is then tiled over the
  // leading dimensions.

  Var add(Var a, Var b) {
    return binary_op(a, b, [](T x, T y) { return x + y; },
                     [](T g, T, T) { return g; },   // d/da
                     [](T g, T, T) { return g; });  // d/db
  }

  Var sub(Var a, Var b) {
    return binary_op(a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
                     [](T g, T, T) { return -g; });
  }

  Var mul(Var a, Var b) {
    return binary_op(a, b, [](T x, T y) { return x * y; },
                     [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
  }

  Var divide(Var a, Var b) {
    return binary_op(a, b, [](T x, T y) { return x / y; },
                     [](T g, T, T y) { return g / y; },
                     [](T g, T x, T y) { return -g * x / (y * y); });
  }

  // m * a + c elementwise with compile-time constants.
  Var affine(Var a, T m, T c) {
    const Tensor<T>& av = node(a).value;
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.numel(); ++i) out[i] = m * av[i] + c;
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai, m](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < go.numel(); ++i) ga[i] += m * go[i];
    });
  }

  Var scale(Var a, T m) { return affine(a, m, T(0)); }
  Var neg(Var a) { return affine(a, T(-1), T(0)); }

  // ---- elementwise unary ----

  Var relu(Var a) {
    const Tensor<T>& av = node(a).value;
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.numel(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      const Tensor<T>& av = g.node_at(ai).value;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < go.numel(); ++i)
        if (av[i] > T(0)) ga[i] += go[i];
    });
  }

  Var exp(Var a) {
    const Tensor<T>& av = node(a).value;
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.numel(); ++i) out[i] = std::exp(av[i]);
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      const Tensor<T>& ov = g.node_at(self).value;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * ov[i];
    });
  }

  Var log(Var a) {
    const Tensor<T>& av = node(a).value;
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.numel(); ++i) out[i] = std::log(av[i]);
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      const Tensor<T>& av = g.node_at(ai).value;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / av[i];
    });
  }

  Var sqrt(Var a) {
    const Tensor<T>& av = node(a).value;
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.numel(); ++i) out[i] = std::sqrt(av[i]);
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      const Tensor<T>& ov = g.node_at(self).value;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / (T(2) * ov[i]);
    });
  }

  // ---- structure ----

  Var reshape(Var a, std::vector<size_t> new_shape) {
    Tensor<T> out = node(a).value.reshaped(std::move(new_shape));
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    });
  }

  Var concat(Var a, Var b, size_t axis) {
    const Tensor<T>& av = node(a).value;
    const Tensor<T>& bv = node(b).value;
    if (av.rank() != bv.rank() || axis >= av.rank())
      throw DimensionError("concat: rank mismatch or bad axis");
    for (size_t d = 0; d < av.rank(); ++d)
      if (d != axis && av.shape()[d] != bv.shape()[d])
        throw DimensionError("concat: shapes " + shape_str(av.shape()) + " and " +
                             shape_str(bv.shape()) + " differ off axis " + std::to_string(axis));
    std::vector<size_t> os = av.shape();
    os[axis] += bv.shape()[axis];
    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= av.shape()[d];
    for (size_t d = axis + 1; d < av.rank(); ++d) inner *= av.shape()[d];
    const size_t a_blk = av.shape()[axis] * inner;
    const size_t b_blk = bv.shape()[axis] * inner;
    Tensor<T> out(os);
    for (size_t o = 0; o < outer; ++o) {
      std::copy(av.data() + o * a_blk, av.data() + (o + 1) * a_blk,
                out.data() + o * (a_blk + b_blk));
      std::copy(bv.data() + o * b_blk, bv.data() + (o + 1) * b_blk,
                out.data() + o * (a_blk + b_blk) + a_blk);
    }
    const int ai = a.i, bi = b.i;
    const bool needs = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(out), needs, nullptr,
                [ai, bi, outer, a_blk, b_blk](Graph& g, int self) {
                  const Tensor<T>& go = g.node_at(self).grad;
                  if (g.wants_grad(ai)) {
                    Tensor<T>& ga = g.grad_buf(ai);
                    for (size_t o = 0; o < outer; ++o)
                      for (size_t k = 0; k < a_blk; ++k)
                        ga[o * a_blk + k] += go[o * (a_blk + b_blk) + k];
                  }
                  if (g.wants_grad(bi)) {
                    Tensor<T>& gb = g.grad_buf(bi);
                    for (size_t o = 0; o < outer; ++o)
                      for (size_t k = 0; k < b_blk; ++k)
                        gb[o * b_blk + k] += go[o * (a_blk + b_blk) + a_blk + k];
                  }
                });
  }

  // Differentiable gather along axis 0 (rows may repeat). Backward is a
  // scatter-add, which lets losses slice shared forward passes.
  Var take_rows(Var a, std::vector<size_t> rows) {
    const Tensor<T>& av = node(a).value;
    if (av.rank() < 1) throw DimensionError("take_rows: need rank >= 1");
    const size_t R = av.shape()[0];
    const size_t row_sz = av.numel() / std::max<size_t>(R, 1);
    for (size_t r : rows)
      if (r >= R) throw DimensionError("take_rows: row index out of range");
    std::vector<size_t> os = av.shape();
    os[0] = rows.size();
    Tensor<T> out(os);
    for (size_t k = 0; k < rows.size(); ++k)
      std::copy(av.data() + rows[k] * row_sz, av.data() + (rows[k] + 1) * row_sz,
                out.data() + k * row_sz);
    const int ai = a.i;
    auto rows_p = std::make_shared<std::vector<size_t>>(std::move(rows));
    return push(std::move(out), node(a).needs_grad, nullptr,
                [ai, rows_p, row_sz](Graph& g, int self) {
                  if (!g.wants_grad(ai)) return;
                  const Tensor<T>& go = g.node_at(self).grad;
                  Tensor<T>& ga = g.grad_buf(ai);
                  for (size_t k = 0; k < rows_p->size(); ++k) {
                    T* dst = ga.data() + (*rows_p)[k] * row_sz;
                    const T* src = go.data() + k * row_sz;
                    for (size_t j = 0; j < row_sz; ++j) dst[j] += src[j];
                  }
                });
  }

  // ---- reductions ----

  Var sum(Var a) {
    const Tensor<T>& av = node(a).value;
    T acc = T(0);
    for (size_t i = 0; i < av.numel(); ++i) acc += av[i];
    const int ai = a.i;
    return push(Tensor<T>::scalar(acc), node(a).needs_grad, nullptr, [ai](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const T go = g.node_at(self).grad[0];
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < ga.numel(); ++i) ga[i] += go;
    });
  }

  Var mean(Var a) {
    const size_t n = node(a).value.numel();
    if (n == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(a), T(1) / T(n));
  }

  Var sum_axis(Var a, size_t axis) { return reduce_axis(a, axis, false); }
  Var mean_axis(Var a, size_t axis) { return reduce_axis(a, axis, true); }

  // Max over one axis; ties resolved to the first maximal element in
  // row-major order. The reduced axis is removed from the shape.
  Var max_axis(Var a, size_t axis) {
    const Tensor<T>& av = node(a).value;
    if (axis >= av.rank()) throw DimensionError("max_axis: bad axis");
    size_t outer = 1, inner = 1;
    const size_t n = av.shape()[axis];
    if (n == 0) throw DimensionError("max_axis: empty axis");
    for (size_t d = 0; d < axis; ++d) outer *= av.shape()[d];
    for (size_t d = axis + 1; d < av.rank(); ++d) inner *= av.shape()[d];
    std::vector<size_t> os;
    for (size_t d = 0; d < av.rank(); ++d)
      if (d != axis) os.push_back(av.shape()[d]);
    Tensor<T> out(os);
    auto arg = std::make_shared<std::vector<size_t>>(outer * inner);
    for (size_t o = 0; o < outer; ++o) {
      for (size_t in = 0; in < inner; ++in) {
        size_t best = 0;
        T bv = av[o * n * inner + in];
        for (size_t k = 1; k < n; ++k) {
          const T v = av[(o * n + k) * inner + in];
          if (v > bv) {
            bv = v;
            best = k;
          }
        }
        out[o * inner + in] = bv;
        (*arg)[o * inner + in] = (o * n + best) * inner + in;
      }
    }
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai, arg](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < go.numel(); ++i) ga[(*arg)[i]] += go[i];
    });
  }

  // ---- matrix ops ----

  Var matmul(Var a, Var b) {
    const Tensor<T>& av = node(a).value;
    const Tensor<T>& bv = node(b).value;
    if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0])
      throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                           shape_str(bv.shape()));
    const size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
    Tensor<T> out({m, n});
    {
      detail::CMapM<T> A(av.data(), long(m), long(k));
      detail::CMapM<T> B(bv.data(), long(k), long(n));
      detail::MapM<T> O(out.data(), long(m), long(n));
      O.noalias() = A * B;
    }
    const int ai = a.i, bi = b.i;
    const bool needs = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(out), needs, nullptr, [ai, bi, m, k, n](Graph& g, int self) {
      const Tensor<T>& go = g.node_at(self).grad;
      detail::CMapM<T> G(go.data(), long(m), long(n));
      if (g.wants_grad(ai)) {
        const Tensor<T>& bv2 = g.node_at(bi).value;
        detail::CMapM<T> B(bv2.data(), long(k), long(n));
        detail::MapM<T> GA(g.grad_buf(ai).data(), long(m), long(k));
        GA.noalias() += G * B.transpose();
      }
      if (g.wants_grad(bi)) {
        const Tensor<T>& av2 = g.node_at(ai).value;
        detail::CMapM<T> A(av2.data(), long(m), long(k));
        detail::MapM<T> GB(g.grad_buf(bi).data(), long(k), long(n));
        GB.noalias() += A.transpose() * G;
      }
    });
  }

  // ---- softmax / losses ----

  Var softmax_rows(Var a) {
    const Tensor<T>& av = node(a).value;
    if (av.rank() != 2) throw DimensionError("softmax_rows: need rank 2");
    const size_t B = av.shape()[0], C = av.shape()[1];
    Tensor<T> out(av.shape());
    for (size_t b = 0; b < B; ++b) {
      const T* row = av.data() + b * C;
      T mx = row[0];
      for (size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
      T z = T(0);
      for (size_t c = 0; c < C; ++c) {
        const T e = std::exp(row[c] - mx);
        out[b * C + c] = e;
        z += e;
      }
      for (size_t c = 0; c < C; ++c) out[b * C + c] /= z;
    }
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr, [ai, B, C](Graph& g, int self) {
      if (!g.wants_grad(ai)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      const Tensor<T>& y = g.node_at(self).value;
      Tensor<T>& ga = g.grad_buf(ai);
      for (size_t b = 0; b < B; ++b) {
        T dot = T(0);
        for (size_t c = 0; c < C; ++c) dot += go[b * C + c] * y[b * C + c];
        for (size_t c = 0; c < C; ++c)
          ga[b * C + c] += y[b * C + c] * (go[b * C + c] - dot);
      }
    });
  }

  // Mean over rows of -log softmax(logits)[target]. Numerically stabilized
  // by row-max subtraction; the fused backward is (softmax - onehot) / B.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& targets) {
    const Tensor<T>& lv = node(logits).value;
    if (lv.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be rank 2");
    const size_t B = lv.shape()[0], C = lv.shape()[1];
    if (targets.size() != B)
      throw DimensionError("softmax_cross_entropy: batch/target count mismatch");
    if (B == 0) throw DimensionError("softmax_cross_entropy: empty batch");
    for (int t : targets)
      if (t < 0 || size_t(t) >= C)
        throw LabelError("softmax_cross_entropy: target " + std::to_string(t) +
                         " outside [0," + std::to_string(C) + ")");
    auto probs = std::make_shared<Tensor<T>>(lv.shape());
    T loss = T(0);
    for (size_t b = 0; b < B; ++b) {
      const T* row = lv.data() + b * C;
      T mx = row[0];
      for (size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
      T z = T(0);
      for (size_t c = 0; c < C; ++c) {
        const T e = std::exp(row[c] - mx);
        (*probs)[b * C + c] = e;
        z += e;
      }
      for (size_t c = 0; c < C; ++c) (*probs)[b * C + c] /= z;
      loss += std::log(z) + mx - row[size_t(targets[b])];
    }
    loss /= T(B);
    const int li = logits.i;
    auto tg = std::make_shared<std::vector<int>>(targets);
    return push(Tensor<T>::scalar(loss), node(logits).needs_grad, nullptr,
                [li, probs, tg, B, C](Graph& g, int self) {
                  if (!g.wants_grad(li)) return;
                  const T go = g.node_at(self).grad[0];
                  Tensor<T>& gl = g.grad_buf(li);
                  const T invB = T(1) / T(B);
                  for (size_t b = 0; b < B; ++b) {
                    for (size_t c = 0; c < C; ++c) {
                      T d = (*probs)[b * C + c];
                      if (c == size_t((*tg)[b])) d -= T(1);
                      gl[b * C + c] += go * d * invB;
                    }
                  }
                });
  }

  // ---- convolution stack ----

  // 3x3 convolution, stride in {1,2}, zero padding in {0,1}. The output
  // spatial size (H + 2p - 3)/s + 1 must be integral, else DimensionError.
  Var conv2d(Var x, Var w, Var bias, size_t stride, size_t pad) {
    const Tensor<T>& xv = node(x).value;
    const Tensor<T>& wv = node(w).value;
    const Tensor<T>& bv = node(bias).value;
    if (xv.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W]");
    if (wv.rank() != 4 || wv.shape()[2] != 3 || wv.shape()[3] != 3)
      throw DimensionError("conv2d: weight must be [O,C,3,3]");
    if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
    if (pad > 1) throw DimensionError("conv2d: pad must be 0 or 1");
    const size_t B = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
    const size_t O = wv.shape()[0];
    if (wv.shape()[1] != C)
      throw DimensionError("conv2d: weight channels " + std::to_string(wv.shape()[1]) +
                           " != input channels " + std::to_string(C));
    if (bv.rank() != 1 || bv.shape()[0] != O)
      throw DimensionError("conv2d: bias must be [O]");
    if (H + 2 * pad < 3 || W + 2 * pad < 3 || (H + 2 * pad - 3) % stride != 0 ||
        (W + 2 * pad - 3) % stride != 0)
      throw DimensionError("conv2d: non-integral output size for H=" + std::to_string(H) +
                           " W=" + std::to_string(W) + " stride=" + std::to_string(stride) +
                           " pad=" + std::to_string(pad));
    const size_t Ho = (H + 2 * pad - 3) / stride + 1;
    const size_t Wo = (W + 2 * pad - 3) / stride + 1;
    const size_t K = C * 9, P = Ho * Wo;

    Tensor<T> out({B, O, Ho, Wo});
    std::vector<T> col(K * P);
    detail::CMapM<T> Wm(wv.data(), long(O), long(K));
    for (size_t b = 0; b < B; ++b) {
      detail::im2col_3x3(xv.data() + b * C * H * W, C, H, W, Ho, Wo, stride, pad, col.data());
      detail::CMapM<T> Cm(col.data(), long(K), long(P));
      detail::MapM<T> Om(out.data() + b * O * P, long(O), long(P));
      Om.noalias() = Wm * Cm;
      for (size_t o = 0; o < O; ++o) {
        T* dst = out.data() + (b * O + o) * P;
        const T bias_o = bv[o];
        for (size_t p = 0; p < P; ++p) dst[p] += bias_o;
      }
    }

    const int xi = x.i, wi = w.i, bi = bias.i;
    const bool needs = node(x).needs_grad || node(w).needs_grad || node(bias).needs_grad;
    return push(std::move(out), needs, nullptr,
                [xi, wi, bi, B, C, H, W, O, Ho, Wo, stride, pad, K, P](Graph& g, int self) {
                  const Tensor<T>& go = g.node_at(self).grad;
                  const Tensor<T>& xv2 = g.node_at(xi).value;
                  const Tensor<T>& wv2 = g.node_at(wi).value;
                  const bool nx = g.wants_grad(xi), nw = g.wants_grad(wi), nb = g.wants_grad(bi);
                  std::vector<T> col(K * P);
                  std::vector<T> dcol(nx ? K * P : 0);
                  for (size_t b = 0; b < B; ++b) {
                    detail::CMapM<T> Gm(go.data() + b * O * P, long(O), long(P));
                    if (nw || nx)
                      detail::im2col_3x3(xv2.data() + b * C * H * W, C, H, W, Ho, Wo, stride,
                                         pad, col.data());
                    if (nw) {
                      detail::CMapM<T> Cm(col.data(), long(K), long(P));
                      detail::MapM<T> GW(g.grad_buf(wi).data(), long(O), long(K));
                      GW.noalias() += Gm * Cm.transpose();
                    }
                    if (nx) {
                      detail::CMapM<T> Wm(wv2.data(), long(O), long(K));
                      detail::MapM<T> Dc(dcol.data(), long(K), long(P));
                      Dc.noalias() = Wm.transpose() * Gm;
                      detail::col2im_add_3x3(dcol.data(), C, H, W, Ho, Wo, stride, pad,
                                             g.grad_buf(xi).data() + b * C * H * W);
                    }
                    if (nb) {
                      Tensor<T>& gb = g.grad_buf(bi);
                      for (size_t o = 0; o < O; ++o) {
                        const T* src = go.data() + (b * O + o) * P;
                        T acc = T(0);
                        for (size_t p = 0; p < P; ++p) acc += src[p];
                        gb[o] += acc;
                      }
                    }
                  }
                });
  }

  // Batch normalization over (B, H, W) per channel. In training mode the
  // batch statistics (biased variance) normalize the batch and update the
  // running buffers in place: running = (1-momentum)*running + momentum*batch.
  // Eval mode normalizes with the running stats captured at node creation.
  Var batch_norm2d(Var x, Var scale, Var shift, Tensor<T>& running_mean, Tensor<T>& running_var,
                   bool train, T momentum, T eps) {
    const Tensor<T>& xv = node(x).value;
    if (xv.rank() != 4) throw DimensionError("batch_norm2d: input must be [B,C,H,W]");
    const size_t B = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
    const Tensor<T>& sv = node(scale).value;
    const Tensor<T>& tv = node(shift).value;
    if (sv.rank() != 1 || sv.shape()[0] != C || tv.rank() != 1 || tv.shape()[0] != C)
      throw DimensionError("batch_norm2d: scale/shift must be [C]");
    if (running_mean.numel() != C || running_var.numel() != C)
      throw DimensionError("batch_norm2d: running stats must be [C]");
    const size_t plane = H * W;
    const size_t n = B * plane;
    auto mean = std::make_shared<std::vector<T>>(C);
    auto invstd = std::make_shared<std::vector<T>>(C);

    if (train) {
      if (n < 2)
        throw DimensionError("batch_norm2d: degenerate batch (B*H*W = " + std::to_string(n) +
                             " < 2) in training mode");
      for (size_t c = 0; c < C; ++c) {
        T m = T(0);
        for (size_t b = 0; b < B; ++b) {
          const T* src = xv.data() + (b * C + c) * plane;
          for (size_t p = 0; p < plane; ++p) m += src[p];
        }
        m /= T(n);
        T var = T(0);
        for (size_t b = 0; b < B; ++b) {
          const T* src = xv.data() + (b * C + c) * plane;
          for (size_t p = 0; p < plane; ++p) {
            const T d = src[p] - m;
            var += d * d;
          }
        }
        var /= T(n);
        (*mean)[c] = m;
        (*invstd)[c] = T(1) / std::sqrt(var + eps);
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
      }
    } else {
      for (size_t c = 0; c < C; ++c) {
        (*mean)[c] = running_mean[c];
        (*invstd)[c] = T(1) / std::sqrt(running_var[c] + eps);
      }
    }

    Tensor<T> out(xv.shape());
    for (size_t b = 0; b < B; ++b) {
      for (size_t c = 0; c < C; ++c) {
        const T* src = xv.data() + (b * C + c) * plane;
        T* dst = out.data() + (b * C + c) * plane;
        const T m = (*mean)[c], is = (*invstd)[c], sc = sv[c], sh = tv[c];
        for (size_t p = 0; p < plane; ++p) dst[p] = sc * (src[p] - m) * is + sh;
      }
    }

    const int xi = x.i, si = scale.i, ti = shift.i;
    const bool needs = node(x).needs_grad || node(scale).needs_grad || node(shift).needs_grad;
    return push(
        std::move(out), needs, nullptr,
        [xi, si, ti, B, C, plane, n, mean, invstd, train](Graph& g, int self) {
          const Tensor<T>& go = g.node_at(self).grad;
          const Tensor<T>& xv2 = g.node_at(xi).value;
          const Tensor<T>& sv2 = g.node_at(si).value;
          const bool nx = g.wants_grad(xi), ns = g.wants_grad(si), nt = g.wants_grad(ti);
          for (size_t c = 0; c < C; ++c) {
            const T m = (*mean)[c], is = (*invstd)[c];
            T sum_g = T(0), sum_gx = T(0);
            for (size_t b = 0; b < B; ++b) {
              const T* gsrc = go.data() + (b * C + c) * plane;
              const T* xsrc = xv2.data() + (b * C + c) * plane;
              for (size_t p = 0; p < plane; ++p) {
                sum_g += gsrc[p];
                sum_gx += gsrc[p] * (xsrc[p] - m) * is;
              }
            }
            if (ns) g.grad_buf(si)[c] += sum_gx;
            if (nt) g.grad_buf(ti)[c] += sum_g;
            if (nx) {
              Tensor<T>& gx = g.grad_buf(xi);
              const T sc_is = sv2[c] * is;
              if (train) {
                const T mg = sum_g / T(n), mgx = sum_gx / T(n);
                for (size_t b = 0; b < B; ++b) {
                  const T* gsrc = go.data() + (b * C + c) * plane;
                  const T* xsrc = xv2.data() + (b * C + c) * plane;
                  T* dst = gx.data() + (b * C + c) * plane;
                  for (size_t p = 0; p < plane; ++p) {
                    const T xh = (xsrc[p] - m) * is;
                    dst[p] += sc_is * (gsrc[p] - mg - xh * mgx);
                  }
                }
              } else {
                for (size_t b = 0; b < B; ++b) {
                  const T* gsrc = go.data() + (b * C + c) * plane;
                  T* dst = gx.data() + (b * C + c) * plane;
                  for (size_t p = 0; p < plane; ++p) dst[p] += sc_is * gsrc[p];
                }
              }
            }
          }
        });
  }

  // 2x2 max pooling with stride 2; spatial dims must be even. Ties resolve
  // to the first maximal element in row-major window order.
  Var maxpool2x2(Var x) {
    const Tensor<T>& xv = node(x).value;
    if (xv.rank() != 4) throw DimensionError("maxpool2x2: input must be [B,C,H,W]");
    const size_t B = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
    if (H % 2 != 0 || W % 2 != 0)
      throw DimensionError("maxpool2x2: odd spatial dims " + std::to_string(H) + "x" +
                           std::to_string(W));
    const size_t Ho = H / 2, Wo = W / 2;
    Tensor<T> out({B, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<size_t>>(out.numel());
    size_t k = 0;
    for (size_t bc = 0; bc < B * C; ++bc) {
      const T* src = xv.data() + bc * H * W;
      for (size_t oy = 0; oy < Ho; ++oy) {
        for (size_t ox = 0; ox < Wo; ++ox, ++k) {
          const size_t base = (2 * oy) * W + 2 * ox;
          const size_t cand[4] = {base, base + 1, base + W, base + W + 1};
          size_t best = cand[0];
          T bv = src[cand[0]];
          for (int t = 1; t < 4; ++t) {
            if (src[cand[t]] > bv) {
              bv = src[cand[t]];
              best = cand[t];
            }
          }
          out[k] = bv;
          (*arg)[k] = bc * H * W + best;
        }
      }
    }
    const int xi = x.i;
    return push(std::move(out), node(x).needs_grad, nullptr, [xi, arg](Graph& g, int self) {
      if (!g.wants_grad(xi)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      Tensor<T>& gx = g.grad_buf(xi);
      for (size_t i = 0; i < go.numel(); ++i) gx[(*arg)[i]] += go[i];
    });
  }

  // Spatial mean [B,C,H,W] -> [B,C].
  Var global_avg_pool(Var x) {
    const Tensor<T>& xv = node(x).value;
    if (xv.rank() != 4) throw DimensionError("global_avg_pool: input must be [B,C,H,W]");
    const size_t B = xv.shape()[0], C = xv.shape()[1], plane = xv.shape()[2] * xv.shape()[3];
    if (plane == 0) throw DimensionError("global_avg_pool: empty spatial dims");
    Tensor<T> out({B, C});
    for (size_t bc = 0; bc < B * C; ++bc) {
      const T* src = xv.data() + bc * plane;
      T acc = T(0);
      for (size_t p = 0; p < plane; ++p) acc += src[p];
      out[bc] = acc / T(plane);
    }
    const int xi = x.i;
    return push(std::move(out), node(x).needs_grad, nullptr, [xi, plane](Graph& g, int self) {
      if (!g.wants_grad(xi)) return;
      const Tensor<T>& go = g.node_at(self).grad;
      Tensor<T>& gx = g.grad_buf(xi);
      const T inv = T(1) / T(plane);
      for (size_t bc = 0; bc < go.numel(); ++bc) {
        const T v = go[bc] * inv;
        T* dst = gx.data() + bc * plane;
        for (size_t p = 0; p < plane; ++p) dst[p] += v;
      }
    });
  }

  // ---- similarity kernels ----

  // cos[b,j] = <f_b, w_j> / (|f_b| * |w_j| + eps), rows f: [B,d], w: [N,d].
  Var pairwise_cosine(Var f, Var w, T eps) {
    const Tensor<T>& fv = node(f).value;
    const Tensor<T>& wv = node(w).value;
    if (fv.rank() != 2 || wv.rank() != 2 || fv.shape()[1] != wv.shape()[1])
      throw DimensionError("pairwise_cosine: need [B,d] and [N,d]");
    const size_t B = fv.shape()[0], d = fv.shape()[1], N = wv.shape()[0];
    auto fn = std::make_shared<std::vector<T>>(B);
    auto wn = std::make_shared<std::vector<T>>(N);
    for (size_t b = 0; b < B; ++b) {
      T acc = T(0);
      for (size_t k = 0; k < d; ++k) acc += fv[b * d + k] * fv[b * d + k];
      (*fn)[b] = std::sqrt(acc);
    }
    for (size_t j = 0; j < N; ++j) {
      T acc = T(0);
      for (size_t k = 0; k < d; ++k) acc += wv[j * d + k] * wv[j * d + k];
      (*wn)[j] = std::sqrt(acc);
    }
    Tensor<T> out({B, N});
    {
      detail::CMapM<T> F(fv.data(), long(B), long(d));
      detail::CMapM<T> Wm(wv.data(), long(N), long(d));
      detail::MapM<T> O(out.data(), long(B), long(N));
      O.noalias() = F * Wm.transpose();
    }
    for (size_t b = 0; b < B; ++b)
      for (size_t j = 0; j < N; ++j) out[b * N + j] /= (*fn)[b] * (*wn)[j] + eps;

    const int fi = f.i, wi = w.i;
    const bool needs = node(f).needs_grad || node(w).needs_grad;
    return push(std::move(out), needs, nullptr,
                [fi, wi, fn, wn, eps, B, d, N](Graph& g, int self) {
                  const Tensor<T>& go = g.node_at(self).grad;
                  const Tensor<T>& cv = g.node_at(self).value;
                  const Tensor<T>& fv2 = g.node_at(fi).value;
                  const Tensor<T>& wv2 = g.node_at(wi).value;
                  const T tiny = T(1e-30);
                  // G1[b,j] = go/q ; r_b = sum_j go*C*wn/q ; s_j = sum_b go*C*fn/q
                  std::vector<T> G1(B * N), r(B, T(0)), s(N, T(0));
                  for (size_t b = 0; b < B; ++b) {
                    for (size_t j = 0; j < N; ++j) {
                      const T q = (*fn)[b] * (*wn)[j] + eps;
                      const T g1 = go[b * N + j] / q;
                      G1[b * N + j] = g1;
                      const T gc = go[b * N + j] * cv[b * N + j] / q;
                      r[b] += gc * (*wn)[j];
                      s[j] += gc * (*fn)[b];
                    }
                  }
                  if (g.wants_grad(fi)) {
                    Tensor<T>& gf = g.grad_buf(fi);
                    detail::CMapM<T> G1m(G1.data(), long(B), long(N));
                    detail::CMapM<T> Wm(wv2.data(), long(N), long(d));
                    detail::MapM<T> GF(gf.data(), long(B), long(d));
                    GF.noalias() += G1m * Wm;
                    for (size_t b = 0; b < B; ++b) {
                      const T coef = r[b] / std::max((*fn)[b], tiny);
                      for (size_t k = 0; k < d; ++k) gf[b * d + k] -= coef * fv2[b * d + k];
                    }
                  }
                  if (g.wants_grad(wi)) {
                    Tensor<T>& gw = g.grad_buf(wi);
                    detail::CMapM<T> G1m(G1.data(), long(B), long(N));
                    detail::CMapM<T> F(fv2.data(), long(B), long(d));
                    detail::MapM<T> GW(gw.data(), long(N), long(d));
                    GW.noalias() += G1m.transpose() * F;
                    for (size_t j = 0; j < N; ++j) {
                      const T coef = s[j] / std::max((*wn)[j], tiny);
                      for (size_t k = 0; k < d; ++k) gw[j * d + k] -= coef * wv2[j * d + k];
                    }
                  }
                });
  }

  // D[b,j] = |f_b - p_j|^2 computed via the quadratic expansion (GEMM-friendly).
  Var pairwise_sqdist(Var f, Var p) {
    const Tensor<T>& fv = node(f).value;
    const Tensor<T>& pv = node(p).value;
    if (fv.rank() != 2 || pv.rank() != 2 || fv.shape()[1] != pv.shape()[1])
      throw DimensionError("pairwise_sqdist: need [B,d] and [N,d]");
    const size_t B = fv.shape()[0], d = fv.shape()[1], N = pv.shape()[0];
    Tensor<T> out({B, N});
    {
      detail::CMapM<T> F(fv.data(), long(B), long(d));
      detail::CMapM<T> P(pv.data(), long(N), long(d));
      detail::MapM<T> O(out.data(), long(B), long(N));
      O.noalias() = T(-2) * (F * P.transpose());
    }
    std::vector<T> f2(B), p2(N);
    for (size_t b = 0; b < B; ++b) {
      T acc = T(0);
      for (size_t k = 0; k < d; ++k) acc += fv[b * d + k] * fv[b * d + k];
      f2[b] = acc;
    }
    for (size_t j = 0; j < N; ++j) {
      T acc = T(0);
      for (size_t k = 0; k < d; ++k) acc += pv[j * d + k] * pv[j * d + k];
      p2[j] = acc;
    }
    for (size_t b = 0; b < B; ++b)
      for (size_t j = 0; j < N; ++j) out[b * N + j] += f2[b] + p2[j];

    const int fi = f.i, pi = p.i;
    const bool needs = node(f).needs_grad || node(p).needs_grad;
    return push(std::move(out), needs, nullptr, [fi, pi, B, d, N](Graph& g, int self) {
      const Tensor<T>& go = g.node_at(self).grad;
      const Tensor<T>& fv2 = g.node_at(fi).value;
      const Tensor<T>& pv2 = g.node_at(pi).value;
      detail::CMapM<T> G(go.data(), long(B), long(N));
      detail::CMapM<T> F(fv2.data(), long(B), long(d));
      detail::CMapM<T> P(pv2.data(), long(N), long(d));
      if (g.wants_grad(fi)) {
        Tensor<T>& gf = g.grad_buf(fi);
        detail::MapM<T> GF(gf.data(), long(B), long(d));
        GF.noalias() -= T(2) * (G * P);
        for (size_t b = 0; b < B; ++b) {
          T rs = T(0);
          for (size_t j = 0; j < N; ++j) rs += go[b * N + j];
          const T c = T(2) * rs;
          for (size_t k = 0; k < d; ++k) gf[b * d + k] += c * fv2[b * d + k];
        }
      }
      if (g.wants_grad(pi)) {
        Tensor<T>& gp = g.grad_buf(pi);
        detail::MapM<T> GP(gp.data(), long(N), long(d));
        GP.noalias() -= T(2) * (G.transpose() * F);
        for (size_t j = 0; j < N; ++j) {
          T cs = T(0);
          for (size_t b = 0; b < B; ++b) cs += go[b * N + j];
          const T c = T(2) * cs;
          for (size_t k = 0; k < d; ++k) gp[j * d + k] += c * pv2[j * d + k];
        }
      }
    });
  }

  // Per-class mean of feature rows: [S,d] + labels -> [n_classes,d].
  // Gradients flow back to the features (each row gets g[class]/count).
  Var class_means(Var f, const std::vector<int>& labels, size_t n_classes) {
    const Tensor<T>& fv = node(f).value;
    if (fv.rank() != 2) throw DimensionError("class_means: features must be [S,d]");
    const size_t S = fv.shape()[0], d = fv.shape()[1];
    if (labels.size() != S) throw DimensionError("class_means: label count mismatch");
    auto counts = std::make_shared<std::vector<size_t>>(n_classes, 0);
    for (int l : labels) {
      if (l < 0 || size_t(l) >= n_classes)
        throw LabelError("class_means: label " + std::to_string(l) + " outside [0," +
                         std::to_string(n_classes) + ")");
      ++(*counts)[size_t(l)];
    }
    for (size_t c = 0; c < n_classes; ++c)
      if ((*counts)[c] == 0)
        throw ContractError("class_means: class " + std::to_string(c) + " has no samples");
    Tensor<T> out({n_classes, d});
    for (size_t s = 0; s < S; ++s) {
      const size_t c = size_t(labels[s]);
      for (size_t k = 0; k < d; ++k) out[c * d + k] += fv[s * d + k];
    }
    for (size_t c = 0; c < n_classes; ++c) {
      const T inv = T(1) / T((*counts)[c]);
      for (size_t k = 0; k < d; ++k) out[c * d + k] *= inv;
    }
    const int fi = f.i;
    auto lb = std::make_shared<std::vector<int>>(labels);
    return push(std::move(out), node(f).needs_grad, nullptr,
                [fi, lb, counts, d](Graph& g, int self) {
                  if (!g.wants_grad(fi)) return;
                  const Tensor<T>& go = g.node_at(self).grad;
                  Tensor<T>& gf = g.grad_buf(fi);
                  for (size_t s = 0; s < lb->size(); ++s) {
                    const size_t c = size_t((*lb)[s]);
                    const T inv = T(1) / T((*counts)[c]);
                    for (size_t k = 0; k < d; ++k) gf[s * d + k] += go[c * d + k] * inv;
                  }
                });
  }

  // ---- backward ----

  // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse creation order.
  // Parameter leaf gradients accumulate into Parameter::grad. A tape can be
  // consumed only once.
  void backward(Var root) {
    if (consumed_) throw ContractError("backward: tape already consumed");
    Node& r = node(root);
    if (r.value.numel() != 1)
      throw ContractError("backward: root must be scalar, got shape " +
                          shape_str(r.value.shape()));
    consumed_ = true;
    if (!r.needs_grad) return;
    grad_buf(root.i).fill(T(1));
    for (int i = root.i; i >= 0; --i) {
      Node& nd = nodes_[size_t(i)];
      if (nd.grad.numel() == 0) continue;  // did not participate
      if (nd.backward) nd.backward(*this, i);
      if (nd.param) {
        Tensor<T>& pg = nd.param->grad;
        for (size_t k = 0; k < pg.numel(); ++k) pg[k] += nd.grad[k];
      }
    }
  }

  bool consumed() const { return consumed_; }

  // ---- used by backward closures ----

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // lazily allocated
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void(Graph&, int)> backward;
  };

  Node& node_at(int i) { return nodes_[size_t(i)]; }
  bool wants_grad(int i) const { return nodes_[size_t(i)].needs_grad; }

  Tensor<T>& grad_buf(int i) {
    Node& nd = nodes_[size_t(i)];
    if (nd.grad.numel() == 0) nd.grad = Tensor<T>(nd.value.shape());
    return nd.grad;
  }

 private:
  Node& node(Var v) {
    if (!v.valid() || size_t(v.i) >= nodes_.size()) throw ContractError("invalid Var handle");
    return nodes_[size_t(v.i)];
  }
  const Node& node(Var v) const { return const_cast<Graph*>(this)->node(v); }

  Var push(Tensor<T> value, bool needs_grad, Parameter<T>* p,
           std::function<void(Graph&, int)> bw) {
    Node nd;
    nd.value = std::move(value);
    nd.needs_grad = needs_grad;
    nd.param = p;
    if (needs_grad) nd.backward = std::move(bw);
    nodes_.push_back(std::move(nd));
    return Var{int(nodes_.size()) - 1};
  }

  static bool is_suffix(const std::vector<size_t>& a, const std::vector<size_t>& b) {
    if (b.size() > a.size()) return false;
    for (size_t k = 0; k < b.size(); ++k)
      if (b[b.size() - 1 - k] != a[a.size() - 1 - k]) return false;
    return true;
  }

  template <typename FwdFn, typename DaFn, typename DbFn>
  Var binary_op(Var a, Var b, FwdFn fwd, DaFn da, DbFn db) {
    const Tensor<T>& av = node(a).value;
    const Tensor<T>& bv = node(b).value;
    if (!is_suffix(av.shape(), bv.shape()))
      throw DimensionError("binary op: shape " + shape_str(bv.shape()) +
                           " is not a suffix of " + shape_str(av.shape()));
    const size_t nb = bv.numel();
    if (nb == 0) throw DimensionError("binary op: empty operand");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i], bv[i % nb]);
    const int ai = a.i, bi = b.i;
    const bool needs = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(out), needs, nullptr, [ai, bi, nb, da, db](Graph& g, int self) {
      const Tensor<T>& go = g.node_at(self).grad;
      const Tensor<T>& av2 = g.node_at(ai).value;
      const Tensor<T>& bv2 = g.node_at(bi).value;
      if (g.wants_grad(ai)) {
        Tensor<T>& ga = g.grad_buf(ai);
        for (size_t i = 0; i < go.numel(); ++i)
          ga[i] += da(go[i], av2[i], bv2[i % nb]);
      }
      if (g.wants_grad(bi)) {
        Tensor<T>& gb = g.grad_buf(bi);
        for (size_t i = 0; i < go.numel(); ++i)
          gb[i % nb] += db(go[i], av2[i], bv2[i % nb]);
      }
    });
  }

  Var reduce_axis(Var a, size_t axis, bool take_mean) {
    const Tensor<T>& av = node(a).value;
    if (axis >= av.rank()) throw DimensionError("reduce_axis: bad axis");
    size_t outer = 1, inner = 1;
    const size_t n = av.shape()[axis];
    if (n == 0) throw DimensionError("reduce_axis: empty axis");
    for (size_t d = 0; d < axis; ++d) outer *= av.shape()[d];
    for (size_t d = axis + 1; d < av.rank(); ++d) inner *= av.shape()[d];
    std::vector<size_t> os;
    for (size_t d = 0; d < av.rank(); ++d)
      if (d != axis) os.push_back(av.shape()[d]);
    Tensor<T> out(os);
    const T w = take_mean ? T(1) / T(n) : T(1);
    for (size_t o = 0; o < outer; ++o)
      for (size_t k = 0; k < n; ++k)
        for (size_t in = 0; in < inner; ++in)
          out[o * inner + in] += av[(o * n + k) * inner + in] * w;
    const int ai = a.i;
    return push(std::move(out), node(a).needs_grad, nullptr,
                [ai, outer, n, inner, w](Graph& g, int self) {
                  if (!g.wants_grad(ai)) return;
                  const Tensor<T>& go = g.node_at(self).grad;
                  Tensor<T>& ga = g.grad_buf(ai);
                  for (size_t o = 0; o < outer; ++o)
                    for (size_t k = 0; k < n; ++k)
                      for (size_t in = 0; in < inner; ++in)
                        ga[(o * n + k) * inner + in] += go[o * inner + in] * w;
                });
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// argmax over each row of a rank-2 tensor; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& m) {
  if (m.rank() != 2) throw DimensionError("argmax_rows: need rank 2");
  const size_t B = m.shape()[0], C = m.shape()[1];
  if (C == 0) throw DimensionError("argmax_rows: empty rows");
  std::vector<int> out(B);
  for (size_t b = 0; b < B; ++b) {
    const T* row = m.data() + b * C;
    size_t best = 0;
    for (size_t c = 1; c < C; ++c)
      if (row[c] > row[best]) best = c;
    out[b] = int(best);
  }
  return out;
}

}  // namespace fewshot
