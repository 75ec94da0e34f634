#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "alignparts/geometry.hpp"

using namespace alignparts;

namespace {

PointCloud random_cloud(Rng& rng, Eigen::Index n, double spread = 1.0) {
  return {rng.uniform_matrix(n, 3, -spread, spread)};
}

// All-pairs reference: sort every other point by (distance, index).
std::vector<std::vector<std::int32_t>> brute_knn(const PointCloud& pc, Eigen::Index k) {
  std::vector<std::vector<std::int32_t>> out;
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    std::vector<std::pair<double, std::int32_t>> all;
    for (Eigen::Index j = 0; j < pc.size(); ++j)
      if (j != i) all.emplace_back((pc.coords.row(i) - pc.coords.row(j)).squaredNorm(), static_cast<std::int32_t>(j));
    std::sort(all.begin(), all.end());
    std::vector<std::int32_t> row;
    for (Eigen::Index j = 0; j < k; ++j) row.push_back(all[static_cast<std::size_t>(j)].second);
    out.push_back(row);
  }
  return out;
}

}  // namespace

TEST(NormalizeUnitCube, CubeCornersMapToSignedCorners) {
  PointCloud pc{Matrix(8, 3)};
  int r = 0;
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 2; ++y)
      for (int z = 0; z < 2; ++z) pc.coords.row(r++) << x, y, z;
  const PointCloud out = normalize_unit_cube(pc);
  for (Eigen::Index i = 0; i < 8; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(std::abs(out.coords(i, c)), 1.0);
  EXPECT_EQ(out.coords(0, 0), -1.0);
  EXPECT_EQ(out.coords(7, 2), 1.0);
}

TEST(NormalizeUnitCube, SinglePointGoesToOrigin) {
  PointCloud pc{Matrix(1, 3)};
  pc.coords << 4.5, -2.0, 7.0;
  EXPECT_TRUE(normalize_unit_cube(pc).coords.isZero(0.0));
}

TEST(NormalizeUnitCube, RandomCloudsFillUnitCubeAndKeepAspect) {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    PointCloud pc = random_cloud(rng, 200);
    pc.coords.col(0) *= 7.0;
    pc.coords.col(1) *= 2.0;
    pc.coords.rowwise() += RowVector::Constant(3, 13.0);
    const PointCloud out = normalize_unit_cube(pc);
    EXPECT_NEAR(out.coords.cwiseAbs().maxCoeff(), 1.0, 1e-12);
    const RowVector ext_in = pc.coords.colwise().maxCoeff() - pc.coords.colwise().minCoeff();
    const RowVector ext_out = out.coords.colwise().maxCoeff() - out.coords.colwise().minCoeff();
    EXPECT_NEAR(ext_out(1) / ext_out(0), ext_in(1) / ext_in(0), 1e-12);
    EXPECT_NEAR(ext_out(2) / ext_out(0), ext_in(2) / ext_in(0), 1e-12);
    // Idempotent.
    EXPECT_TRUE(normalize_unit_cube(out).coords.isApprox(out.coords, 1e-12));
    EXPECT_LT((normalize_unit_cube(out).coords - out.coords).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(KnnGraph, CollinearTieBreaksToLowerIndex) {
  PointCloud pc{Matrix(3, 3)};
  pc.coords << 0, 0, 0, 1, 0, 0, 2, 0, 0;
  const KnnGraph g = knn_graph(pc, 1);
  EXPECT_EQ(g.k_eff, 1);
  EXPECT_EQ(g.neighbor(1, 0), 0);
  EXPECT_EQ(g.neighbor(0, 0), 1);
  EXPECT_EQ(g.neighbor(2, 0), 1);
}

TEST(KnnGraph, GridMatchesBruteForce) {
  PointCloud pc{Matrix(125, 3)};
  int r = 0;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y)
      for (int z = 0; z < 5; ++z) pc.coords.row(r++) << x, y, z;
  const KnnGraph g = knn_graph(pc, 16);
  const auto ref = brute_knn(pc, 16);
  for (Eigen::Index i = 0; i < 125; ++i)
    for (Eigen::Index j = 0; j < 16; ++j) EXPECT_EQ(g.neighbor(i, j), ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
}

TEST(KnnGraph, RandomInstancesMatchBruteForceWithoutSelfLoops) {
  Rng rng(11);
  for (int t = 0; t < 30; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.index(499));
    const PointCloud pc = random_cloud(rng, n);
    const KnnGraph g = knn_graph(pc, 16);
    EXPECT_EQ(g.k_eff, std::min<Eigen::Index>(16, n - 1));
    const auto ref = brute_knn(pc, g.k_eff);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < g.k_eff; ++j) {
        EXPECT_NE(g.neighbor(i, j), i);
        ASSERT_EQ(g.neighbor(i, j), ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
      }
    }
  }
}

TEST(KnnGraph, NeedsTwoPoints) {
  EXPECT_THROW(knn_graph(PointCloud{Matrix::Zero(1, 3)}, 16), Error);
}

TEST(FourierEncode, ZeroDisplacement) {
  const Vector e = fourier_encode({0, 0, 0}, 6);
  ASSERT_EQ(e.size(), 39);
  EXPECT_TRUE(e.head(21).isZero(0.0));
  EXPECT_TRUE(e.tail(18).isOnes(0.0));
}

TEST(FourierEncode, LayoutForSingleFrequency) {
  const Vector e = fourier_encode({std::numbers::pi, 0, 0}, 1);
  ASSERT_EQ(e.size(), 9);
  EXPECT_EQ(e(0), std::numbers::pi);
  EXPECT_NEAR(e(3), 0.0, 1e-15);  // sin(pi)
  EXPECT_EQ(e(6), -1.0);          // cos(pi)
  EXPECT_EQ(e(7), 1.0);           // cos(0) for y
}

TEST(FourierEncode, AxisMajorFrequencyMinorOrder) {
  const std::array<double, 3> d{0.1, 0.2, 0.3};
  const Vector e = fourier_encode(d, 6);
  for (int a = 0; a < 3; ++a)
    for (int f = 0; f < 6; ++f) {
      EXPECT_EQ(e(3 + a * 6 + f), std::sin(d[static_cast<std::size_t>(a)] * std::pow(2.0, f)));
      EXPECT_EQ(e(21 + a * 6 + f), std::cos(d[static_cast<std::size_t>(a)] * std::pow(2.0, f)));
    }
}

TEST(FourierEncode, DistinctInputsGiveDistinctCodes) {
  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    const std::array<double, 3> a{rng.uniform() * 3, rng.uniform() * 3, rng.uniform() * 3};
    std::array<double, 3> b = a;
    b[rng.index(3)] += 1e-3;
    EXPECT_GT((fourier_encode(a) - fourier_encode(b)).norm(), 0.0);
    EXPECT_EQ(fourier_encode(a), fourier_encode(a));
  }
}
