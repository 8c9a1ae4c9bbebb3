#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "femae/patchmask.hpp"
#include "oracles.hpp"

namespace femae {
namespace {

using Td = Tensor<double>;

TEST(Patchify, FullScaleShapes) {
  std::mt19937_64 rng(1);
  auto cloud = oracle::random_cloud(1024, rng);
  auto ps = patchify(cloud, 64, 32);
  EXPECT_EQ(ps.centers.shape(), (Shape{64, 3}));
  EXPECT_EQ(ps.groups.shape(), (Shape{64, 32, 3}));
  EXPECT_EQ(ps.source_indices.rows, 64u);
  EXPECT_EQ(ps.source_indices.cols, 32u);
}

TEST(Patchify, EveryPointItsOwnPatch) {
  std::mt19937_64 rng(2);
  auto cloud = oracle::random_cloud(12, rng);
  auto ps = patchify(cloud, 12, 1);
  for (double v : ps.groups.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Patchify, GroupsAreCenterRelativeKnn) {
  std::mt19937_64 rng(3);
  auto cloud = oracle::random_cloud(200, rng);
  auto ps = patchify(cloud, 16, 10);
  auto centers_ref = oracle::fps(cloud, 16, 0);
  Td centers({16, 3});
  for (std::size_t j = 0; j < 16; ++j) std::copy_n(&cloud[3 * centers_ref[j]], 3, &centers[3 * j]);
  EXPECT_EQ(ps.centers, centers);
  EXPECT_EQ(ps.source_indices.data, oracle::knn(centers, cloud, 10));
  for (std::size_t j = 0; j < 16; ++j)
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t d = 0; d < 3; ++d) {
        const std::size_t src = ps.source_indices(j, i);
        EXPECT_EQ(ps.groups[(j * 10 + i) * 3 + d], cloud.at(src, d) - centers.at(j, d));
      }
  EXPECT_EQ(patchify(cloud, 16, 10), ps);
}

TEST(Patchify, RejectsCountsAboveCloudSize) {
  std::mt19937_64 rng(4);
  auto cloud = oracle::random_cloud(8, rng);
  EXPECT_THROW(patchify(cloud, 9, 2), UsageError);
  EXPECT_THROW(patchify(cloud, 4, 32), UsageError);
}

TEST(GlobalRandomMask, Counts) {
  Rng rng(5);
  auto plan = global_random_mask(64, 0.6, rng);
  EXPECT_EQ(plan.masked_count(), 38u);
  EXPECT_EQ(plan.visible_count(), 26u);
  EXPECT_EQ(global_random_mask(4, 0.5, rng).masked_count(), 2u);
  EXPECT_THROW(global_random_mask(4, 0.05, rng), UsageError);
  EXPECT_THROW(global_random_mask(4, 0.95, rng), UsageError);
  EXPECT_THROW(global_random_mask(4, 1.0, rng), UsageError);
}

TEST(GlobalRandomMask, SeededAndUniform) {
  Rng a(9), b(9);
  EXPECT_EQ(global_random_mask(64, 0.6, a).mask, global_random_mask(64, 0.6, b).mask);
  Rng rng(10);
  std::vector<int> hits(64, 0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    auto plan = global_random_mask(64, 0.6, rng);
    for (std::size_t i = 0; i < 64; ++i) hits[i] += plan.mask[i];
  }
  for (int h : hits) EXPECT_NEAR(double(h) / trials, 38.0 / 64.0, 0.02);
}

Td collinear(std::size_t n) {
  Td t({n, 3});
  for (std::size_t i = 0; i < n; ++i) t[3 * i] = double(i);
  return t;
}

TEST(LocalBlockMask, CollinearSeedZero) {
  auto plan = local_block_mask_from_seed(collinear(4), 0.5, 0);
  EXPECT_EQ(plan.mask, (std::vector<bool>{true, true, false, false}));
  EXPECT_EQ(plan.seed_patch, std::optional<std::size_t>(0));
}

TEST(LocalBlockMask, MatchesOracleKnnOfSeedAndIsContiguous) {
  std::mt19937_64 crng(11);
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    auto centers = oracle::random_cloud(64, crng);
    auto plan = local_block_mask(centers, 0.6, rng);
    ASSERT_TRUE(plan.seed_patch.has_value());
    EXPECT_EQ(plan.masked_count(), 38u);
    Td seed({1, 3});
    std::copy_n(&centers[3 * *plan.seed_patch], 3, &seed[0]);
    auto want = oracle::knn(seed, centers, 38);
    std::set<std::size_t> masked;
    for (std::size_t i = 0; i < 64; ++i)
      if (plan.mask[i]) masked.insert(i);
    EXPECT_EQ(masked, std::set<std::size_t>(want.begin(), want.end()));
  }
}

TEST(LocalBlockMask, MultipleBlocksKeepCount) {
  std::mt19937_64 crng(13);
  Rng rng(14);
  auto centers = oracle::random_cloud(64, crng);
  auto plan = local_block_mask(centers, 0.6, rng, 3);
  EXPECT_EQ(plan.masked_count(), 38u);
}

TEST(Split, PartitionsPreserveOrderAndMergeBack) {
  std::mt19937_64 crng(15);
  auto ps = patchify(oracle::random_cloud(300, crng), 64, 8);
  Rng rng(16);
  auto plan = global_random_mask(64, 0.6, rng);
  auto [vis, hid] = split(ps, plan);
  EXPECT_EQ(vis.count(), 26u);
  EXPECT_EQ(hid.count(), 38u);
  EXPECT_TRUE(std::is_sorted(vis.patch_ids.begin(), vis.patch_ids.end()));
  EXPECT_TRUE(std::is_sorted(hid.patch_ids.begin(), hid.patch_ids.end()));
  EXPECT_EQ(merge(vis, hid), ps);
}

TEST(Split, TwoPatchExampleAndLengthMismatch) {
  std::mt19937_64 crng(17);
  auto ps = patchify(oracle::random_cloud(10, crng), 2, 3);
  MaskPlan plan{MaskStrategy::GlobalRandom, 0.5, {true, false}, std::nullopt};
  auto [vis, hid] = split(ps, plan);
  EXPECT_EQ(vis.patch_ids, (std::vector<std::size_t>{1}));
  EXPECT_EQ(hid.patch_ids, (std::vector<std::size_t>{0}));
  plan.mask.push_back(false);
  EXPECT_THROW(split(ps, plan), UsageError);
}

}  // namespace
}  // namespace femae
