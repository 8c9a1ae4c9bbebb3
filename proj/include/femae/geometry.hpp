#pragma once

// Exact point-cloud kernels. All routines are brute force: desk-scale clouds
// hold at most a few thousand points. Ties resolve to the lowest index.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "femae/autodiff.hpp"
#include "femae/errors.hpp"
#include "femae/tensor.hpp"

namespace femae {

/// N×3 coordinates plus an optional class id.
template <typename T>
struct PointCloud {
  Tensor<T> points;
  std::optional<int> label;

  PointCloud() = default;
  explicit PointCloud(Tensor<T> pts, std::optional<int> lbl = std::nullopt)
      : points(std::move(pts)), label(lbl) {
    if (points.rank() != 2 || points.dim(1) != 3) {
      throw ConfigError("point cloud must be N x 3, got " + shape_str(points.shape()));
    }
    if (!points.all_finite()) throw NumericError("point cloud has non-finite coordinates");
  }

  std::size_t size() const { return points.dim(0); }
};

/// Row-major index matrix (rows × cols).
struct IndexMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> data;

  std::size_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::vector<std::size_t> row(std::size_t r) const {
    return {data.begin() + static_cast<std::ptrdiff_t>(r * cols),
            data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)};
  }
};

namespace geom_detail {

template <typename T>
void check_coords(const Tensor<T>& pts, const char* what) {
  if (pts.rank() != 2 || pts.dim(1) != 3) {
    throw UsageError(std::string(what) + " must be an N x 3 coordinate array, got " + shape_str(pts.shape()));
  }
}

template <typename T>
T sq_dist(const T* a, const T* b) {
  const T dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace geom_detail

/// D[i][j] = |A_i − B_j|².
template <typename T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty() || b.empty()) throw UsageError("pairwise_sq_dist on an empty point set");
  geom_detail::check_coords(a, "A");
  geom_detail::check_coords(b, "B");
  const std::size_t na = a.dim(0), nb = b.dim(0);
  Tensor<T> d({na, nb});
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) d[i * nb + j] = geom_detail::sq_dist(&a[3 * i], &b[3 * j]);
  return d;
}

/// Greedy farthest point sampling; the first pick is `start`.
template <typename T>
std::vector<std::size_t> fps(const Tensor<T>& points, std::size_t count, std::size_t start = 0) {
  geom_detail::check_coords(points, "points");
  const std::size_t n = points.dim(0);
  if (count < 1 || count > n) {
    throw UsageError("fps: requested " + std::to_string(count) + " samples from " + std::to_string(n) + " points");
  }
  if (start >= n) throw UsageError("fps: start index out of range");
  std::vector<std::size_t> picks;
  picks.reserve(count);
  std::vector<T> min_d(n, std::numeric_limits<T>::infinity());
  std::size_t cur = start;
  for (std::size_t s = 0; s < count; ++s) {
    picks.push_back(cur);
    std::size_t best = 0;
    T best_d = T(-1);
    for (std::size_t i = 0; i < n; ++i) {
      min_d[i] = std::min(min_d[i], geom_detail::sq_dist(&points[3 * i], &points[3 * cur]));
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    cur = best;
  }
  return picks;
}

/// For each query row, the k nearest reference indices ascending by (distance, index).
template <typename T>
IndexMatrix knn(const Tensor<T>& query, const Tensor<T>& ref, std::size_t k) {
  geom_detail::check_coords(query, "query");
  geom_detail::check_coords(ref, "ref");
  const std::size_t nq = query.dim(0), nr = ref.dim(0);
  if (k < 1 || k > nr) {
    throw UsageError("knn: k=" + std::to_string(k) + " but reference set has " + std::to_string(nr) + " points");
  }
  IndexMatrix out{nq, k, std::vector<std::size_t>(nq * k)};
  std::vector<std::size_t> order(nr);
  std::vector<T> d(nr);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t j = 0; j < nr; ++j) d[j] = geom_detail::sq_dist(&query[3 * q], &ref[3 * j]);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t x, std::size_t y) { return d[x] < d[y] || (d[x] == d[y] && x < y); });
    std::copy_n(order.begin(), k, out.data.begin() + static_cast<std::ptrdiff_t>(q * k));
  }
  return out;
}

/// Index of the nearest point of `ref` to `p` (lowest index on ties) and its squared distance.
template <typename T>
std::pair<std::size_t, T> nearest(const T* p, const T* ref, std::size_t n) {
  std::size_t best = 0;
  T bd = std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const T dj = geom_detail::sq_dist(p, ref + 3 * j);
    if (dj < bd) {
      bd = dj;
      best = j;
    }
  }
  return {best, bd};
}

/// l2 Chamfer distance: mean squared nearest-neighbour distance, summed over both directions.
template <typename T>
T chamfer_l2(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.empty() || y.empty()) throw UsageError("chamfer_l2 on an empty point set");
  geom_detail::check_coords(x, "X");
  geom_detail::check_coords(y, "Y");
  const std::size_t a = x.dim(0), b = y.dim(0);
  T sx = T(0), sy = T(0);
  for (std::size_t i = 0; i < a; ++i) sx += nearest(&x[3 * i], y.data().data(), b).second;
  for (std::size_t j = 0; j < b; ++j) sy += nearest(&y[3 * j], x.data().data(), a).second;
  return sx / T(a) + sy / T(b);
}

/// Subtract the centroid and scale by the largest norm. A cloud of identical points maps to zeros.
template <typename T>
Tensor<T> normalize_unit_sphere(const Tensor<T>& points) {
  geom_detail::check_coords(points, "points");
  const std::size_t n = points.dim(0);
  T c[3] = {T(0), T(0), T(0)};
  for (std::size_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) c[d] += points[3 * i + d];
  for (auto& v : c) v /= T(n);
  Tensor<T> out(points.shape());
  T max_norm = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0);
    for (int d = 0; d < 3; ++d) {
      out[3 * i + d] = points[3 * i + d] - c[d];
      s += out[3 * i + d] * out[3 * i + d];
    }
    max_norm = std::max(max_norm, std::sqrt(s));
  }
  if (max_norm <= std::numeric_limits<T>::epsilon()) {
    out.fill(T(0));
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= max_norm;
  return out;
}

/// Mean per-patch l2 Chamfer between predicted and target patches (both q×m×3, or q×(m·3)),
/// differentiable w.r.t. `pred` via nearest-neighbour routing.
template <typename T>
Var<T> patch_chamfer(Var<T> pred, Var<T> target) {
  const auto& pv = pred.value();
  const auto& tv = target.value();
  if (pv.shape() != tv.shape()) {
    throw UsageError("patch_chamfer shape mismatch: " + shape_str(pv.shape()) + " vs " + shape_str(tv.shape()));
  }
  const std::size_t q = pv.dim(0);
  const std::size_t m = pv.size() / (q * 3);
  if (q * m * 3 != pv.size() || m == 0) throw UsageError("patch_chamfer expects q x m x 3 patches");
  // For each patch: nearest target of every predicted point, nearest prediction of every target point.
  std::vector<std::size_t> pred_nn(q * m), tgt_nn(q * m);
  T total = T(0);
  for (std::size_t s = 0; s < q; ++s) {
    const T* P = pv.data().data() + s * m * 3;
    const T* G = tv.data().data() + s * m * 3;
    T sp = T(0), sg = T(0);
    for (std::size_t i = 0; i < m; ++i) {
      auto [j, d] = nearest(P + 3 * i, G, m);
      pred_nn[s * m + i] = j;
      sp += d;
    }
    for (std::size_t j = 0; j < m; ++j) {
      auto [i, d] = nearest(G + 3 * j, P, m);
      tgt_nn[s * m + j] = i;
      sg += d;
    }
    total += sp / T(m) + sg / T(m);
  }
  total /= T(q);
  return pred.graph->record(
      "patch_chamfer", Tensor<T>({1}, std::vector<T>{total}), {pred.id, target.id},
      [q, m, pred_nn = std::move(pred_nn), tgt_nn = std::move(tgt_nn)](Graph<T>& g, std::size_t self) {
        const auto& nd = g.node(self);
        const std::size_t ip = nd.inputs[0], it = nd.inputs[1];
        const auto& P = g.node(ip).value;
        const auto& G = g.node(it).value;
        const T w = nd.grad[0] * T(2) / (T(q) * T(m));
        const bool gp = g.requires_grad(ip), gt = g.requires_grad(it);
        std::span<T> dp = gp ? g.grad_buffer(ip) : std::span<T>{};
        std::span<T> dt = gt ? g.grad_buffer(it) : std::span<T>{};
        for (std::size_t s = 0; s < q; ++s) {
          const std::size_t base = s * m * 3;
          for (std::size_t i = 0; i < m; ++i) {
            const std::size_t j = pred_nn[s * m + i];
            for (int d = 0; d < 3; ++d) {
              const T diff = P[base + 3 * i + d] - G[base + 3 * j + d];
              if (gp) dp[base + 3 * i + d] += w * diff;
              if (gt) dt[base + 3 * j + d] -= w * diff;
            }
          }
          for (std::size_t j = 0; j < m; ++j) {
            const std::size_t i = tgt_nn[s * m + j];
            for (int d = 0; d < 3; ++d) {
              const T diff = G[base + 3 * j + d] - P[base + 3 * i + d];
              if (gt) dt[base + 3 * j + d] += w * diff;
              if (gp) dp[base + 3 * i + d] -= w * diff;
            }
          }
        }
      });
}

}  // namespace femae
