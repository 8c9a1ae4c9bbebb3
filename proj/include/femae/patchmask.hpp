#pragma once

// Patch grouping (FPS centers + KNN groups) and the two patch masking strategies.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "femae/errors.hpp"
#include "femae/geometry.hpp"
#include "femae/tensor.hpp"

namespace femae {

using Rng = std::mt19937_64;

/// p patch centers and their p×m center-relative point groups.
template <typename T>
struct PatchSet {
  Tensor<T> centers;                      // p × 3
  Tensor<T> groups;                       // p × m × 3, point − center
  IndexMatrix source_indices;             // p × m, indices into the cloud
  std::vector<std::size_t> patch_ids;     // original patch order (identity after patchify)

  std::size_t count() const { return centers.dim(0); }
  std::size_t group_size() const { return groups.dim(1); }

  /// Patches selected by `ids`, in the given order.
  PatchSet subset(const std::vector<std::size_t>& ids) const {
    const std::size_t m = group_size();
    PatchSet out;
    out.centers = Tensor<T>({ids.size(), 3});
    out.groups = Tensor<T>({ids.size(), m, 3});
    out.source_indices = IndexMatrix{ids.size(), m, std::vector<std::size_t>(ids.size() * m)};
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const std::size_t s = ids[r];
      std::copy_n(&centers[3 * s], 3, &out.centers[3 * r]);
      std::copy_n(&groups[s * m * 3], m * 3, &out.groups[r * m * 3]);
      std::copy_n(source_indices.data.begin() + static_cast<std::ptrdiff_t>(s * m), m,
                  out.source_indices.data.begin() + static_cast<std::ptrdiff_t>(r * m));
      out.patch_ids.push_back(patch_ids[s]);
    }
    return out;
  }

  friend bool operator==(const PatchSet& a, const PatchSet& b) {
    return a.centers == b.centers && a.groups == b.groups && a.source_indices.data == b.source_indices.data &&
           a.patch_ids == b.patch_ids;
  }
};

/// FPS centers, KNN groups, center-relative coordinates.
template <typename T>
PatchSet<T> patchify(const Tensor<T>& cloud, std::size_t p, std::size_t m, std::size_t start = 0) {
  geom_detail::check_coords(cloud, "cloud");
  const std::size_t n = cloud.dim(0);
  if (p < 1 || m < 1 || p > n || m > n) {
    throw UsageError("patchify: cloud has " + std::to_string(n) + " points but needs p=" + std::to_string(p) +
                     " centers and m=" + std::to_string(m) + " points per group");
  }
  const auto center_ids = fps(cloud, p, start);
  PatchSet<T> ps;
  ps.centers = Tensor<T>({p, 3});
  for (std::size_t j = 0; j < p; ++j) std::copy_n(&cloud[3 * center_ids[j]], 3, &ps.centers[3 * j]);
  ps.source_indices = knn(ps.centers, cloud, m);
  ps.groups = Tensor<T>({p, m, 3});
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t src = ps.source_indices(j, i);
      for (int d = 0; d < 3; ++d) ps.groups[(j * m + i) * 3 + d] = cloud[3 * src + d] - ps.centers[3 * j + d];
    }
  ps.patch_ids.resize(p);
  for (std::size_t j = 0; j < p; ++j) ps.patch_ids[j] = j;
  return ps;
}

enum class MaskStrategy { GlobalRandom, LocalBlock };

inline const char* to_string(MaskStrategy s) {
  return s == MaskStrategy::GlobalRandom ? "global_random" : "local_block";
}

struct MaskPlan {
  MaskStrategy strategy = MaskStrategy::GlobalRandom;
  double ratio = 0.0;
  std::vector<bool> mask;              // true = hidden from the encoder
  std::optional<std::size_t> seed_patch;

  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
  std::size_t visible_count() const { return mask.size() - masked_count(); }
};

/// round(r·p); rejects ratios that would hide nothing or everything.
inline std::size_t mask_count(std::size_t p, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw UsageError("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(p)));
  if (k == 0 || k >= p) {
    throw UsageError("mask ratio " + std::to_string(ratio) + " on " + std::to_string(p) +
                     " patches masks " + std::to_string(k) + "; need 0 < count < p");
  }
  return k;
}

/// Uniform choice of round(r·p) patches without replacement.
inline MaskPlan global_random_mask(std::size_t p, double ratio, Rng& rng) {
  const std::size_t k = mask_count(p, ratio);
  std::vector<std::size_t> perm(p);
  for (std::size_t i = 0; i < p; ++i) perm[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, p - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  MaskPlan plan{MaskStrategy::GlobalRandom, ratio, std::vector<bool>(p, false), std::nullopt};
  for (std::size_t i = 0; i < k; ++i) plan.mask[perm[i]] = true;
  return plan;
}

/// Block of round(r·p) patches nearest (by center) to a given seed patch, seed included.
template <typename T>
MaskPlan local_block_mask_from_seed(const Tensor<T>& centers, double ratio, std::size_t seed_patch) {
  const std::size_t p = centers.dim(0);
  const std::size_t k = mask_count(p, ratio);
  if (seed_patch >= p) throw UsageError("local block seed patch out of range");
  Tensor<T> seed({1, 3});
  std::copy_n(&centers[3 * seed_patch], 3, &seed[0]);
  const auto nn = knn(seed, centers, k);
  MaskPlan plan{MaskStrategy::LocalBlock, ratio, std::vector<bool>(p, false), seed_patch};
  for (std::size_t i = 0; i < k; ++i) plan.mask[nn(0, i)] = true;
  return plan;
}

/// Local block masking with a uniformly drawn seed. With `blocks > 1` the masked count is split
/// across several blocks, each grown from a fresh seed over still-visible patches.
template <typename T>
MaskPlan local_block_mask(const Tensor<T>& centers, double ratio, Rng& rng, std::size_t blocks = 1) {
  const std::size_t p = centers.dim(0);
  const std::size_t k = mask_count(p, ratio);
  if (blocks < 1 || blocks > k) throw UsageError("local block count must lie in [1, masked count]");
  std::uniform_int_distribution<std::size_t> pick(0, p - 1);
  const std::size_t first = pick(rng);
  if (blocks == 1) return local_block_mask_from_seed(centers, ratio, first);

  MaskPlan plan{MaskStrategy::LocalBlock, ratio, std::vector<bool>(p, false), first};
  std::size_t seed = first;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t quota = k / blocks + (b < k % blocks ? 1 : 0);
    if (b > 0) {
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < p; ++i)
        if (!plan.mask[i]) free.push_back(i);
      std::uniform_int_distribution<std::size_t> pf(0, free.size() - 1);
      seed = free[pf(rng)];
    }
    std::vector<std::pair<T, std::size_t>> order;
    for (std::size_t i = 0; i < p; ++i) {
      if (plan.mask[i]) continue;
      order.emplace_back(geom_detail::sq_dist(&centers[3 * seed], &centers[3 * i]), i);
    }
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < quota; ++i) plan.mask[order[i].second] = true;
  }
  return plan;
}

/// (visible, masked) partition, each side in original patch order.
template <typename T>
std::pair<PatchSet<T>, PatchSet<T>> split(const PatchSet<T>& ps, const MaskPlan& plan) {
  if (plan.mask.size() != ps.count()) {
    throw UsageError("mask length " + std::to_string(plan.mask.size()) + " != patch count " +
                     std::to_string(ps.count()));
  }
  std::vector<std::size_t> vis, hid;
  for (std::size_t i = 0; i < plan.mask.size(); ++i) (plan.mask[i] ? hid : vis).push_back(i);
  return {ps.subset(vis), ps.subset(hid)};
}

/// Inverse of split: interleave both sides back into patch-id order.
template <typename T>
PatchSet<T> merge(const PatchSet<T>& a, const PatchSet<T>& b) {
  const std::size_t total = a.count() + b.count();
  PatchSet<T> both;
  both.centers = Tensor<T>({total, 3});
  const std::size_t m = a.group_size();
  both.groups = Tensor<T>({total, m, 3});
  both.source_indices = IndexMatrix{total, m, std::vector<std::size_t>(total * m)};
  both.patch_ids.resize(total);
  for (const PatchSet<T>* side : {&a, &b}) {
    for (std::size_t r = 0; r < side->count(); ++r) {
      const std::size_t dst = side->patch_ids[r];
      if (dst >= total) throw UsageError("merge: patch id out of range");
      std::copy_n(&side->centers[3 * r], 3, &both.centers[3 * dst]);
      std::copy_n(&side->groups[r * m * 3], m * 3, &both.groups[dst * m * 3]);
      std::copy_n(side->source_indices.data.begin() + static_cast<std::ptrdiff_t>(r * m), m,
                  both.source_indices.data.begin() + static_cast<std::ptrdiff_t>(dst * m));
      both.patch_ids[dst] = dst;
    }
  }
  return both;
}

}  // namespace femae
