#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace lcd;

namespace {

const PointCloud kTwo({{0, 0, 0}, {1, 0, 0}});
const PointCloud kOrigin({{0, 0, 0}});

// Independent reference: direct double loop, no tie rule needed for distances.
double ref_directed_mean(const PointCloud& a, const PointCloud& b) {
  double s = 0.0;
  for (const auto& p : a) {
    double best = INFINITY;
    for (const auto& q : b) best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
    s += best;
  }
  return s / static_cast<double>(a.size());
}

PointCloud translated(const PointCloud& c, const Point& t) {
  std::vector<Point> pts(c.begin(), c.end());
  for (auto& p : pts)
    for (int k = 0; k < 3; ++k) p[k] += t[k];
  return PointCloud(std::move(pts));
}

// Points on a coarse integer lattice so many targets are equidistant.
PointCloud lattice_cloud(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> u(-2, 2);
  std::vector<Point> pts(n);
  for (auto& p : pts) p = {double(u(rng)), double(u(rng)), double(u(rng))};
  return PointCloud(std::move(pts));
}

}  // namespace

TEST(PointCloud, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(PointCloud({}), std::invalid_argument);
  EXPECT_THROW(PointCloud({{0, NAN, 0}}), std::invalid_argument);
  EXPECT_THROW(PointCloud::from_tensor(Tensor({2, 2})), std::invalid_argument);
}

TEST(NnMatch, HandExample) {
  for (auto method : {NnMethod::brute, NnMethod::kdtree}) {
    auto m = nn_match(kTwo, kOrigin, method);
    EXPECT_EQ(m.indices, (std::vector<std::size_t>{0, 0}));
    EXPECT_EQ(m.distances, (std::vector<double>{0.0, 1.0}));
  }
}

TEST(NnMatch, SelfMatchIsZero) {
  std::mt19937_64 rng(1);
  auto c = test::random_cloud(rng, 100);
  for (double d : nn_match(c, c).distances) EXPECT_EQ(d, 0.0);
}

TEST(NnMatch, KdTreeEqualsBruteForce) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<std::size_t> size(1, 300);
    auto a = trial % 2 ? test::random_cloud(rng, size(rng)) : lattice_cloud(rng, size(rng));
    auto b = trial % 2 ? test::random_cloud(rng, size(rng)) : lattice_cloud(rng, size(rng));
    auto kd = nn_match(a, b, NnMethod::kdtree);
    auto bf = nn_match(a, b, NnMethod::brute);
    ASSERT_EQ(kd.indices, bf.indices) << "trial " << trial;
    ASSERT_EQ(kd.distances, bf.distances) << "trial " << trial;
  }
}

TEST(NnMatch, TiesResolveToLowestIndex) {
  PointCloud target({{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {1, 0, 0}});
  for (auto method : {NnMethod::brute, NnMethod::kdtree})
    EXPECT_EQ(nn_match(kOrigin, target, method).indices[0], 0u);
  // Duplicates beyond one kd-tree leaf.
  std::vector<Point> many(100, Point{2, 2, 2});
  many.push_back({0.5, 0, 0});
  many.push_back({0.5, 0, 0});
  EXPECT_EQ(nn_match(kOrigin, PointCloud(many), NnMethod::kdtree).indices[0], 100u);
}

TEST(Chamfer, HandValues) {
  EXPECT_EQ(chamfer(kTwo, kOrigin), 0.25);
  EXPECT_EQ(chamfer(kTwo, kTwo), 0.0);
  // Squared mode differs only when distances are not 0 or 1.
  PointCloud far({{0, 0, 0}, {2, 0, 0}});
  EXPECT_EQ(chamfer(far, kOrigin, DistanceMode::euclidean), 0.5);
  EXPECT_EQ(chamfer(far, kOrigin, DistanceMode::squared), 1.0);
}

TEST(Chamfer, MatchesReferenceAndIsSymmetric) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = test::random_cloud(rng, 40 + trial);
    auto b = test::random_cloud(rng, 70 - trial / 2);
    const double ref = 0.5 * (ref_directed_mean(a, b) + ref_directed_mean(b, a));
    EXPECT_NEAR(chamfer(a, b), ref, 1e-12);
    EXPECT_EQ(chamfer(a, b), chamfer(b, a));
  }
}

TEST(Hausdorff, HandValues) {
  EXPECT_EQ(hausdorff(kTwo, kOrigin), 1.0);
  EXPECT_EQ(directed_hausdorff(kTwo, kOrigin), 1.0);
  EXPECT_EQ(directed_hausdorff(kOrigin, kTwo), 0.0);
  EXPECT_EQ(hausdorff(kTwo, kTwo), 0.0);
}

TEST(Hausdorff, DominatesDirectedMeansAndChamfer) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = test::random_cloud(rng, 32);
    auto b = test::random_cloud(rng, 48);
    const double h = hausdorff(a, b);
    EXPECT_GE(h, ref_directed_mean(a, b));
    EXPECT_GE(h, ref_directed_mean(b, a));
    EXPECT_LE(chamfer(a, b), h);
  }
}

TEST(Metrics, PermutationInvariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = test::random_cloud(rng, 64);
    auto b = test::random_cloud(rng, 50);
    auto pa = test::permuted(a, rng), pb = test::permuted(b, rng);
    EXPECT_NEAR(chamfer(pa, pb), chamfer(a, b), 1e-12);
    EXPECT_NEAR(hausdorff(pa, pb), hausdorff(a, b), 1e-12);
    EXPECT_NEAR(mcd(pa, pb), mcd(a, b), 1e-12);
  }
}

TEST(Metrics, TranslationLeavesMatchedDistances) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = test::random_cloud(rng, 60);
    auto b = test::random_cloud(rng, 60);
    const Point t{3.5, -1.25, 0.75};
    auto m0 = nn_match(a, b), m1 = nn_match(translated(a, t), translated(b, t));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(m0.distances[i], m1.distances[i], 1e-12);
  }
}

TEST(Fps, Examples) {
  PointCloud line({{0, 0, 0}, {10, 0, 0}, {5, 0, 0}});
  EXPECT_EQ(fps(line, 2, 0), PointCloud({{0, 0, 0}, {10, 0, 0}}));
  EXPECT_EQ(fps(line, 1, 2), PointCloud({{5, 0, 0}}));
  EXPECT_EQ(fps(line, 3, 0), PointCloud({{0, 0, 0}, {10, 0, 0}, {5, 0, 0}}));
  EXPECT_THROW(fps(line, 0, 0), std::invalid_argument);
  EXPECT_THROW(fps(line, 4, 0), std::invalid_argument);
  EXPECT_THROW(fps(line, 1, 3), std::invalid_argument);
}

TEST(Fps, OutputIsSubsetAndSpreads) {
  std::mt19937_64 rng(7);
  auto c = test::random_cloud(rng, 200);
  auto s = fps(c, 50, 0);
  ASSERT_EQ(s.size(), 50u);
  for (const auto& p : s) EXPECT_NE(std::find(c.begin(), c.end(), p), c.end());
  // Each selected point is at least as far from its predecessors as the next one.
  double prev = INFINITY;
  for (std::size_t k = 1; k < s.size(); ++k) {
    double dmin = INFINITY;
    for (std::size_t j = 0; j < k; ++j) dmin = std::min(dmin, squared_distance(s[k], s[j]));
    EXPECT_LE(dmin, prev);
    prev = dmin;
  }
}

TEST(Mcd, Examples) {
  EXPECT_EQ(mcd(kTwo, kTwo), 0.0);
  const std::vector<double> half{1.0, 0.5};
  EXPECT_EQ(mcd(kTwo, kOrigin, half), 0.125);
  std::mt19937_64 rng(8);
  auto a = test::random_cloud(rng, 64), b = test::random_cloud(rng, 64);
  const std::vector<double> one{1.0};
  EXPECT_EQ(mcd(a, b, one), chamfer(a, b));
  EXPECT_THROW(mcd(a, b, std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(mcd(a, b, std::vector<double>{1.5}), std::invalid_argument);
}

TEST(Mcd, DefaultScalesAreFullHalfQuarter) {
  std::mt19937_64 rng(9);
  auto a = test::random_cloud(rng, 64), b = test::random_cloud(rng, 64);
  const double manual =
      (chamfer(a, b) + chamfer(fps(a, 32, canonical_seed(a)), fps(b, 32, canonical_seed(b))) +
       chamfer(fps(a, 16, canonical_seed(a)), fps(b, 16, canonical_seed(b)))) / 3.0;
  EXPECT_NEAR(mcd(a, b), manual, 1e-15);
}
