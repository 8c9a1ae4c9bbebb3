#pragma once

// Brute-force reference implementations used only by tests. Written without
// reusing any library kernel so they stay independent of the code they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <array>
#include <random>
#include <utility>
#include <vector>

#include "femae/tensor.hpp"

namespace femae::oracle {

using Td = Tensor<double>;

inline Td random_cloud(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Td t({n, 3});
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

inline double dist2(const Td& a, std::size_t i, const Td& b, std::size_t j) {
  double s = 0;
  for (std::size_t d = 0; d < 3; ++d) s += std::pow(a.at(i, d) - b.at(j, d), 2);
  return s;
}

inline Td pairwise_sq_dist(const Td& a, const Td& b) {
  Td out({a.dim(0), b.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(0); ++j) out.at(i, j) = dist2(a, i, b, j);
  return out;
}

/// Greedy max-min selection recomputing every min distance from scratch.
inline std::vector<std::size_t> fps(const Td& pts, std::size_t count, std::size_t start) {
  std::vector<std::size_t> sel{start};
  while (sel.size() < count) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < pts.dim(0); ++i) {
      double md = std::numeric_limits<double>::infinity();
      for (auto s : sel) md = std::min(md, dist2(pts, i, pts, s));
      if (md > best) {
        best = md;
        arg = i;
      }
    }
    sel.push_back(arg);
  }
  return sel;
}

/// Full sort of (distance, index) pairs per query row; flat q×k.
inline std::vector<std::size_t> knn(const Td& q, const Td& ref, std::size_t k) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < q.dim(0); ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < ref.dim(0); ++j) all.emplace_back(dist2(q, i, ref, j), j);
    std::sort(all.begin(), all.end());
    for (std::size_t j = 0; j < k; ++j) out.push_back(all[j].second);
  }
  return out;
}

inline double chamfer(const Td& x, const Td& y) {
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double md = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < y.dim(0); ++j) md = std::min(md, dist2(x, i, y, j));
    sx += md;
  }
  for (std::size_t j = 0; j < y.dim(0); ++j) {
    double md = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < x.dim(0); ++i) md = std::min(md, dist2(x, i, y, j));
    sy += md;
  }
  return sx / double(x.dim(0)) + sy / double(y.dim(0));
}

/// Uniform random rotation from a normalized Gaussian quaternion.
inline std::array<double, 9> random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  double w = n(rng), x = n(rng), y = n(rng), z = n(rng);
  const double s = std::sqrt(w * w + x * x + y * y + z * z);
  w /= s, x /= s, y /= s, z /= s;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
          2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
          2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

inline Td rotate(const Td& pts, const std::array<double, 9>& r) {
  Td out(pts.shape());
  for (std::size_t i = 0; i < pts.dim(0); ++i)
    for (std::size_t a = 0; a < 3; ++a) {
      double s = 0;
      for (std::size_t b = 0; b < 3; ++b) s += r[3 * a + b] * pts.at(i, b);
      out.at(i, a) = s;
    }
  return out;
}

}  // namespace femae::oracle
