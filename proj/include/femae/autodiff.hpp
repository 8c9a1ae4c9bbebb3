#pragma once

// Minimal reverse-mode differentiation over dense tensors.
//
// A Graph is a tape: every op appends a Node holding its forward value and a
// backward closure. Nodes are appended in evaluation order, so walking the
// tape backwards is a valid topological order and each node is visited once.
// All reductions run in a fixed row-major, left-to-right order so that
// forward and backward passes are bitwise reproducible.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "femae/errors.hpp"
#include "femae/tensor.hpp"

namespace femae {

/// A named, persistent trainable tensor. Graphs reference parameters; they never own them.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  std::size_t numel() const noexcept { return value.size(); }
  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return graph->value(*this).shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    std::vector<std::size_t> saved_indices;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return leaf("constant", std::move(value), false); }

  /// Leaf whose gradient is kept on the node (read back with grad()).
  Var<T> input(Tensor<T> value, bool requires_grad = true) {
    return leaf("input", std::move(value), requires_grad);
  }

  /// Leaf bound to a Parameter. Registered once per graph; backward() adds into Parameter::grad.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
    Var<T> v = leaf("param:" + p.name, p.value, p.trainable);
    nodes_[v.id].param = &p;
    param_ids_.emplace(&p, v.id);
    return v;
  }

  /// Append an op result. `backward` is only kept when some input requires a gradient.
  Var<T> record(std::string op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward,
                std::vector<std::size_t> saved_indices = {}) {
    if (!value.all_finite()) {
      throw NumericError("op '" + op + "' (node " + std::to_string(nodes_.size()) +
                         ") produced a non-finite value");
    }
    bool rg = false;
    for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.requires_grad = rg;
    n.inputs = std::move(inputs);
    if (rg) n.backward = std::move(backward);
    n.saved_indices = std::move(saved_indices);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Node& node(std::size_t id) { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Mutable gradient buffer of node `id`, zero-initialized on first touch.
  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad.data();
  }

  /// Gradient of the sink w.r.t. `v` (zeros if nothing flowed to it).
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  /// Reverse sweep from a scalar sink. Parameter gradients are added into Parameter::grad.
  void backward(Var<T> sink) {
    if (nodes_.at(sink.id).value.size() != 1) {
      throw UsageError("backward requires a scalar sink, got shape " +
                       shape_str(nodes_[sink.id].value.shape()));
    }
    if (backward_done_) throw UsageError("backward already ran on this graph");
    backward_done_ = true;
    grad_buffer(sink.id)[0] = T(1);
    for (std::size_t i = sink.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr || n.grad.empty() || !n.param->trainable) continue;
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

 private:
  Var<T> leaf(std::string op, Tensor<T> value, bool requires_grad) {
    if (!value.all_finite()) throw NumericError("leaf '" + op + "' holds a non-finite value");
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
  bool backward_done_ = false;
};

namespace detail {

/// C[M×N] (+)= A[M×K] · B[K×N], all row-major. For each output element the
/// products are added in ascending k; the k loop is unrolled by four.
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict ci = c + i * n;
    const T* ai = a + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const T a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const T* __restrict b0 = b + p * n;
      const T* __restrict b1 = b0 + n;
      const T* __restrict b2 = b1 + n;
      const T* __restrict b3 = b2 + n;
      for (std::size_t j = 0; j < n; ++j) ci[j] = ci[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const T av = ai[p];
      const T* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

/// C[M×K] += G[M×N] · B[K×N]^T, via an explicit transpose of B.
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), c, m, n, k);
}

/// C[K×N] += A[M×K]^T · G[M×N]; rows of A are consumed in ascending order, four at a time.
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict g, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + i * k;
    const T* a1 = a0 + k;
    const T* a2 = a1 + k;
    const T* a3 = a2 + k;
    const T* __restrict g0 = g + i * n;
    const T* __restrict g1 = g0 + n;
    const T* __restrict g2 = g1 + n;
    const T* __restrict g3 = g2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      T* __restrict cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] = cp[j] + v0 * g0[j] + v1 * g1[j] + v2 * g2[j] + v3 * g3[j];
    }
  }
  for (; i < m; ++i) {
    const T* ai = a + i * k;
    const T* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      T* __restrict cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

/// (outer, extent, inner) split of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  require(axis < s.size(), "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

/// (M×K)·(K×N) → M×N
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                  "matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.graph->record("matmul", std::move(out), {a.id, b.id}, [m, k, n](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    const std::size_t ia = nd.inputs[0], ib = nd.inputs[1];
    const T* go = nd.grad.data().data();
    if (g.requires_grad(ia)) {
      detail::gemm_nt(go, g.node(ib).value.data().data(), g.grad_buffer(ia).data(), m, k, n);
    }
    if (g.requires_grad(ib)) {
      detail::gemm_tn(g.node(ia).value.data().data(), go, g.grad_buffer(ib).data(), m, k, n);
    }
  });
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Var<T> binary_same_shape(const char* name, Var<T> a, Var<T> b, Fwd fwd, Bwd bwd) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.shape() == bv.shape(), std::string(name) + " shape mismatch: " + shape_str(av.shape()) + " vs " +
                                        shape_str(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  return a.graph->record(name, std::move(out), {a.id, b.id}, [bwd](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    const std::size_t ia = nd.inputs[0], ib = nd.inputs[1];
    const auto& x = g.node(ia).value;
    const auto& y = g.node(ib).value;
    const auto& go = nd.grad;
    if (g.requires_grad(ia)) {
      auto ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += bwd(go[i], x[i], y[i]).first;
    }
    if (g.requires_grad(ib)) {
      auto gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += bwd(go[i], x[i], y[i]).second;
    }
  });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const char* name, Var<T> a, Fwd fwd, Deriv deriv) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return a.graph->record(name, std::move(out), {a.id}, [deriv](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    const auto& x = g.node(nd.inputs[0]).value;
    auto gx = g.grad_buffer(nd.inputs[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += nd.grad[i] * deriv(x[i], nd.value[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary_same_shape<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return std::pair{g, g}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary_same_shape<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return std::pair{g, -g}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary_same_shape<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T x, T y) { return std::pair{g * y, g * x}; });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return detail::unary<T>(
      "scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary<T>(
      "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

/// Expand size-1 (or missing leading) axes of `a` to `shape`.
template <typename T>
Var<T> broadcast(Var<T> a, Shape shape) {
  const auto& av = a.value();
  const Shape& src = av.shape();
  detail::require(src.size() <= shape.size(), "broadcast cannot drop axes: " + shape_str(src) + " -> " + shape_str(shape));
  const std::size_t rank = shape.size();
  Shape padded(rank - src.size(), 1);
  padded.insert(padded.end(), src.begin(), src.end());
  std::vector<std::size_t> src_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    detail::require(padded[i] == shape[i] || padded[i] == 1,
                    "broadcast incompatible: " + shape_str(src) + " -> " + shape_str(shape));
    src_stride[i] = padded[i] == 1 ? 0 : stride;
    stride *= padded[i];
  }
  const std::size_t total = shape_numel(shape);
  std::vector<std::size_t> map(total);
  {
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < total; ++flat) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += idx[d] * src_stride[d];
      map[flat] = off;
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < shape[d]) break;
        idx[d] = 0;
      }
    }
  }
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < total; ++i) out[i] = av[map[i]];
  return a.graph->record("broadcast", std::move(out), {a.id}, [map = std::move(map)](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    auto ga = g.grad_buffer(nd.inputs[0]);
    for (std::size_t i = 0; i < map.size(); ++i) ga[map[i]] += nd.grad[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.graph->record("reshape", std::move(out), {a.id}, [](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    detail::add_into<T>(g.grad_buffer(nd.inputs[0]), nd.grad.data());
  });
}

/// 2-D transpose.
template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  detail::require(av.rank() == 2, "transpose expects a matrix, got " + shape_str(av.shape()));
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.graph->record("transpose", std::move(out), {a.id}, [r, c](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    auto ga = g.grad_buffer(nd.inputs[0]);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += nd.grad[j * r + i];
  });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat of zero tensors");
  const Shape& first = parts[0].shape();
  Shape out_shape = first;
  out_shape.at(axis) = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    detail::require(s.size() == first.size(), "concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis) detail::require(s[d] == first[d], "concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
    }
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, offsets, extents;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    const std::size_t ext = pv.dim(axis);
    for (std::size_t o = 0; o < split.outer; ++o) {
      const T* src = pv.data().data() + o * ext * split.inner;
      T* dst = out.data().data() + (o * split.extent + offset) * split.inner;
      std::copy(src, src + ext * split.inner, dst);
    }
    ids.push_back(p.id);
    offsets.push_back(offset);
    extents.push_back(ext);
    offset += ext;
  }
  return parts[0].graph->record(
      "concat", std::move(out), ids, [split, offsets, extents](Graph<T>& g, std::size_t self) {
        const auto& nd = g.node(self);
        for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
          if (!g.requires_grad(nd.inputs[k])) continue;
          auto gp = g.grad_buffer(nd.inputs[k]);
          const std::size_t ext = extents[k];
          for (std::size_t o = 0; o < split.outer; ++o) {
            const T* src = nd.grad.data().data() + (o * split.extent + offsets[k]) * split.inner;
            T* dst = gp.data() + o * ext * split.inner;
            for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
  std::vector<Var<T>> v(parts);
  return concat<T>(std::span<const Var<T>>(v), axis);
}

/// Elements [start, start+length) along `axis`.
template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& av = a.value();
  const auto split = detail::split_at(av.shape(), axis);
  detail::require(length > 0 && start + length <= split.extent,
                  "slice [" + std::to_string(start) + "," + std::to_string(start + length) + ") out of range for " +
                      shape_str(av.shape()));
  Shape out_shape = av.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    const T* src = av.data().data() + (o * split.extent + start) * split.inner;
    std::copy(src, src + length * split.inner, out.data().data() + o * length * split.inner);
  }
  return a.graph->record("slice", std::move(out), {a.id}, [split, start, length](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    auto ga = g.grad_buffer(nd.inputs[0]);
    for (std::size_t o = 0; o < split.outer; ++o) {
      T* dst = ga.data() + (o * split.extent + start) * split.inner;
      const T* src = nd.grad.data().data() + o * length * split.inner;
      for (std::size_t i = 0; i < length * split.inner; ++i) dst[i] += src[i];
    }
  });
}

/// Row gather along axis 0; repeated indices scatter-add in backward.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> indices) {
  const auto& av = a.value();
  detail::require(av.rank() >= 1 && !indices.empty(), "gather_rows needs a non-empty index list");
  const std::size_t rows = av.dim(0);
  const std::size_t width = av.size() / rows;
  Shape out_shape = av.shape();
  out_shape[0] = indices.size();
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    detail::require(indices[r] < rows, "gather_rows index " + std::to_string(indices[r]) + " >= " + std::to_string(rows));
    std::copy_n(av.data().data() + indices[r] * width, width, out.data().data() + r * width);
  }
  std::vector<std::size_t> saved = indices;
  return a.graph->record(
      "gather_rows", std::move(out), {a.id},
      [idx = std::move(indices), width](Graph<T>& g, std::size_t self) {
        const auto& nd = g.node(self);
        auto ga = g.grad_buffer(nd.inputs[0]);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          const T* src = nd.grad.data().data() + r * width;
          T* dst = ga.data() + idx[r] * width;
          for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
        }
      },
      std::move(saved));
}

template <typename T>
Var<T> softmax_lastaxis(Var<T> a) {
  const auto& av = a.value();
  const std::size_t w = av.shape().back();
  const std::size_t rows = av.size() / w;
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data().data() + r * w;
    T* y = out.data().data() + r * w;
    T mx = x[0];
    for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, x[j]);
    T s = T(0);
    for (std::size_t j = 0; j < w; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < w; ++j) y[j] /= s;
  }
  return a.graph->record("softmax", std::move(out), {a.id}, [rows, w](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    auto ga = g.grad_buffer(nd.inputs[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = nd.value.data().data() + r * w;
      const T* gy = nd.grad.data().data() + r * w;
      T dot = T(0);
      for (std::size_t j = 0; j < w; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < w; ++j) ga[r * w + j] += y[j] * (gy[j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalize each row over the last axis, then apply per-channel gain/bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(kLayerNormEps)) {
  const auto& xv = x.value();
  const std::size_t w = xv.shape().back();
  const std::size_t rows = xv.size() / w;
  detail::require(gain.value().size() == w && bias.value().size() == w,
                  "layer_norm affine size mismatch for width " + std::to_string(w));
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(xv.size()), inv_std(rows);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data().data() + r * w;
    T mean = T(0);
    for (std::size_t j = 0; j < w; ++j) mean += xr[j];
    mean /= T(w);
    T var = T(0);
    for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(w);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < w; ++j) {
      xhat[r * w + j] = (xr[j] - mean) * is;
      out[r * w + j] = xhat[r * w + j] * gv[j] + bv[j];
    }
  }
  return x.graph->record(
      "layer_norm", std::move(out), {x.id, gain.id, bias.id},
      [rows, w, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g, std::size_t self) {
        const auto& nd = g.node(self);
        const std::size_t ix = nd.inputs[0], ig = nd.inputs[1], ib = nd.inputs[2];
        const auto& gv = g.node(ig).value;
        const T* gy = nd.grad.data().data();
        if (g.requires_grad(ig)) {
          auto gg = g.grad_buffer(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) gg[j] += gy[r * w + j] * xhat[r * w + j];
        }
        if (g.requires_grad(ib)) {
          auto gb = g.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) gb[j] += gy[r * w + j];
        }
        if (g.requires_grad(ix)) {
          auto gx = g.grad_buffer(ix);
          std::vector<T> dxh(w);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < w; ++j) {
              dxh[j] = gy[r * w + j] * gv[j];
              m1 += dxh[j];
              m2 += dxh[j] * xhat[r * w + j];
            }
            m1 /= T(w);
            m2 /= T(w);
            for (std::size_t j = 0; j < w; ++j) gx[r * w + j] += inv_std[r] * (dxh[j] - m1 - xhat[r * w + j] * m2);
          }
        }
      });
}

/// Max along `axis`; the argmax (first on ties) is saved and receives the whole gradient.
template <typename T>
Var<T> max_over_axis(Var<T> a, std::size_t axis) {
  const auto& av = a.value();
  const auto split = detail::split_at(av.shape(), axis);
  Shape out_shape = av.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> arg(split.outer * split.inner);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      std::size_t best = 0;
      T bv = av[(o * split.extent) * split.inner + i];
      for (std::size_t e = 1; e < split.extent; ++e) {
        const T v = av[(o * split.extent + e) * split.inner + i];
        if (v > bv) {
          bv = v;
          best = e;
        }
      }
      out[o * split.inner + i] = bv;
      arg[o * split.inner + i] = best;
    }
  }
  std::vector<std::size_t> saved = arg;
  return a.graph->record(
      "max_over_axis", std::move(out), {a.id},
      [split, arg = std::move(arg)](Graph<T>& g, std::size_t self) {
        const auto& nd = g.node(self);
        auto ga = g.grad_buffer(nd.inputs[0]);
        for (std::size_t o = 0; o < split.outer; ++o)
          for (std::size_t i = 0; i < split.inner; ++i) {
            const std::size_t k = o * split.inner + i;
            ga[(o * split.extent + arg[k]) * split.inner + i] += nd.grad[k];
          }
      },
      std::move(saved));
}

template <typename T>
Var<T> mean_over_axis(Var<T> a, std::size_t axis) {
  const auto& av = a.value();
  const auto split = detail::split_at(av.shape(), axis);
  Shape out_shape = av.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  const T inv = T(1) / T(split.extent);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      T s = T(0);
      for (std::size_t e = 0; e < split.extent; ++e) s += av[(o * split.extent + e) * split.inner + i];
      out[o * split.inner + i] = s * inv;
    }
  return a.graph->record("mean_over_axis", std::move(out), {a.id}, [split, inv](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    auto ga = g.grad_buffer(nd.inputs[0]);
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t i = 0; i < split.inner; ++i)
        for (std::size_t e = 0; e < split.extent; ++e)
          ga[(o * split.extent + e) * split.inner + i] += nd.grad[o * split.inner + i] * inv;
  });
}

/// Sum of all elements → shape (1).
template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T s = T(0);
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  return a.graph->record("sum", Tensor<T>({1}, std::vector<T>{s}), {a.id}, [](Graph<T>& g, std::size_t self) {
    const auto& nd = g.node(self);
    const T go = nd.grad[0];
    for (auto& v : g.grad_buffer(nd.inputs[0])) v += go;
  });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Max over all coordinates of |analytic − numeric| / max(1, |numeric|), numeric by
/// central differences with step h. `program` must build a scalar from the given
/// parameters and be deterministic.
template <typename T>
T grad_check(const std::function<Var<T>(Graph<T>&)>& program, std::span<Parameter<T>* const> inputs,
             T h = T(1e-5)) {
  for (auto* p : inputs) {
    p->trainable = true;
    p->grad = Tensor<T>(p->value.shape());
  }
  {
    Graph<T> g;
    Var<T> out = program(g);
    g.backward(out);
  }
  auto eval = [&]() {
    Graph<T> g;
    return program(g).value()[0];
  };
  T worst = T(0);
  for (auto* p : inputs) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T saved = p->value[i];
      p->value[i] = saved + h;
      const T up = eval();
      p->value[i] = saved - h;
      const T down = eval();
      p->value[i] = saved;
      const T numeric = (up - down) / (T(2) * h);
      const T err = std::abs(p->grad[i] - numeric) / std::max(T(1), std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

template <typename T>
T grad_check(const std::function<Var<T>(Graph<T>&)>& program, std::initializer_list<Parameter<T>*> inputs,
             T h = T(1e-5)) {
  std::vector<Parameter<T>*> v(inputs);
  return grad_check<T>(program, std::span<Parameter<T>* const>(v), h);
}

}  // namespace femae
