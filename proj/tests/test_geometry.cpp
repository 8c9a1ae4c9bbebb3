#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "femae/geometry.hpp"
#include "oracles.hpp"

namespace femae {
namespace {

using Td = Tensor<double>;

TEST(PairwiseSqDist, HandCases) {
  EXPECT_EQ(pairwise_sq_dist(Td::matrix({{0, 0, 0}}), Td::matrix({{0, 0, 0}})), Td::matrix({{0}}));
  EXPECT_EQ(pairwise_sq_dist(Td::matrix({{0, 0, 0}}), Td::matrix({{1, 0, 0}, {0, 2, 0}})), Td::matrix({{1, 4}}));
}

TEST(PairwiseSqDist, MatchesScalarLoopAndIsSymmetric) {
  std::mt19937_64 rng(1);
  auto a = oracle::random_cloud(16, rng), b = oracle::random_cloud(8, rng);
  auto d = pairwise_sq_dist(a, b);
  auto ref = oracle::pairwise_sq_dist(a, b);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(d[i], ref[i], 1e-12);
  auto s = pairwise_sq_dist(a, a);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(s.at(i, i), 0.0);
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(s.at(i, j), s.at(j, i));
  }
}

TEST(PairwiseSqDist, EmptyInputRejected) {
  EXPECT_THROW(pairwise_sq_dist(Td(), Td::matrix({{0, 0, 0}})), UsageError);
}

Td line(std::initializer_list<double> xs) {
  Td t({xs.size(), 3});
  std::size_t i = 0;
  for (double x : xs) t[3 * i++] = x;
  return t;
}

TEST(Fps, LineExamples) {
  auto pts = line({0, 10, 5, 1});
  EXPECT_EQ(fps(pts, 2, 0), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(fps(pts, 3, 0), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(fps(pts, 5, 0), UsageError);
}

TEST(Fps, MatchesBruteForceAndIsDistinct) {
  std::mt19937_64 rng(2);
  auto pts = oracle::random_cloud(64, rng);
  auto got = fps(pts, 8, 0);
  EXPECT_EQ(got, oracle::fps(pts, 8, 0));
  std::sort(got.begin(), got.end());
  EXPECT_EQ(std::adjacent_find(got.begin(), got.end()), got.end());
}

TEST(Fps, PermutationConsistent) {
  std::mt19937_64 rng(3);
  auto pts = oracle::random_cloud(40, rng);
  std::vector<std::size_t> perm(40);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  // permuted[perm[i]] = pts[i]
  Td permuted({40, 3});
  for (std::size_t i = 0; i < 40; ++i) std::copy_n(&pts[3 * i], 3, &permuted[3 * perm[i]]);
  auto a = fps(pts, 10, 5);
  auto b = fps(permuted, 10, perm[5]);
  for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(b[j], perm[a[j]]);
}

TEST(Knn, HandCases) {
  auto q = Td::matrix({{0, 0, 0}});
  auto ref = line({3, 1, 2});
  EXPECT_EQ(knn(q, ref, 2).row(0), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(knn(Td::matrix({{2, 0, 0}}), ref, 1).row(0), (std::vector<std::size_t>{2}));
  EXPECT_THROW(knn(q, ref, 4), UsageError);
}

TEST(Knn, MatchesFullSortOracleAndRowsAscending) {
  std::mt19937_64 rng(4);
  auto q = oracle::random_cloud(32, rng), ref = oracle::random_cloud(128, rng);
  auto got = knn(q, ref, 20);
  auto want = oracle::knn(q, ref, 20);
  EXPECT_EQ(got.data, want);
  auto d = pairwise_sq_dist(q, ref);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 1; j < 20; ++j) EXPECT_LE(d.at(i, got(i, j - 1)), d.at(i, got(i, j)));
  auto self = knn(ref, ref, 1);
  for (std::size_t i = 0; i < 128; ++i) EXPECT_EQ(self(i, 0), i);
}

TEST(Knn, TiesBreakTowardLowerIndex) {
  auto ref = Td::matrix({{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}});
  EXPECT_EQ(knn(Td::matrix({{0, 0, 0}}), ref, 2).row(0), (std::vector<std::size_t>{0, 1}));
}

TEST(Chamfer, HandCases) {
  auto x = Td::matrix({{0, 0, 0}, {1, 0, 0}});
  EXPECT_EQ(chamfer_l2(x, x), 0.0);
  EXPECT_DOUBLE_EQ(chamfer_l2(x, Td::matrix({{0, 0, 0}})), 0.5);
  EXPECT_THROW(chamfer_l2(x, Td()), UsageError);
}

TEST(Chamfer, MatchesDoubleLoopSymmetricAndRotationInvariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = oracle::random_cloud(32, rng), y = oracle::random_cloud(32, rng);
    const double cd = chamfer_l2(x, y);
    EXPECT_NEAR(cd, oracle::chamfer(x, y), 1e-12);
    EXPECT_NEAR(cd, chamfer_l2(y, x), 1e-12);
    auto rot = oracle::random_rotation(rng);
    EXPECT_NEAR(cd, chamfer_l2(oracle::rotate(x, rot), oracle::rotate(y, rot)), 1e-5);
  }
}

TEST(Chamfer, PatchChamferMatchesKernelAndFiniteDifferences) {
  std::mt19937_64 rng(6);
  const std::size_t q = 3, m = 5;
  Parameter<double> pred("pred", oracle::random_cloud(q * m, rng).reshaped({q, m, 3}));
  Parameter<double> target("target", oracle::random_cloud(q * m, rng).reshaped({q, m, 3}));
  {
    Graph<double> g;
    const double v = patch_chamfer(g.param(pred), g.param(target)).value()[0];
    double want = 0;
    for (std::size_t s = 0; s < q; ++s) {
      Td a({m, 3}), b({m, 3});
      std::copy_n(&pred.value[s * m * 3], m * 3, &a[0]);
      std::copy_n(&target.value[s * m * 3], m * 3, &b[0]);
      want += oracle::chamfer(a, b);
    }
    EXPECT_NEAR(v, want / q, 1e-12);
  }
  const double err = grad_check<double>(
      [&](Graph<double>& g) { return patch_chamfer(g.param(pred), g.param(target)); }, {&pred, &target});
  EXPECT_LT(err, 1e-4);
}

TEST(Normalize, HandCasesAndIdempotence) {
  auto n = normalize_unit_sphere(Td::matrix({{2, 0, 0}, {0, 0, 0}}));
  EXPECT_EQ(n, Td::matrix({{1, 0, 0}, {-1, 0, 0}}));
  auto z = normalize_unit_sphere(Td::matrix({{3, 3, 3}, {3, 3, 3}}));
  EXPECT_EQ(z, Td({2, 3}));
  std::mt19937_64 rng(7);
  auto once = normalize_unit_sphere(oracle::random_cloud(50, rng));
  auto twice = normalize_unit_sphere(once);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-6);
  double c[3] = {0, 0, 0}, mx = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0;
    for (int d = 0; d < 3; ++d) {
      c[d] += once[3 * i + d];
      s += once[3 * i + d] * once[3 * i + d];
    }
    mx = std::max(mx, std::sqrt(s));
  }
  for (double v : c) EXPECT_NEAR(v / 50, 0.0, 1e-6);
  EXPECT_NEAR(mx, 1.0, 1e-6);
}

}  // namespace
}  // namespace femae
