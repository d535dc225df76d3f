#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "jpool/poolgen.hpp"
#include "oracles.hpp"

namespace jpool {
namespace {

using net3d::VolumeShape;

std::vector<GridPoint> random_points(std::size_t n, const VolumeShape& s, std::mt19937_64& rng) {
  std::vector<GridPoint> pts(n);
  for (auto& g : pts) {
    g.x = rng() % s.w;
    g.y = rng() % s.h;
    g.t = rng() % s.l;
  }
  return pts;
}

// P[m][c] = sum_k A[m][k] * B[c][k], written as a direct double sum.
Matrix naive_bilinear(const Matrix& a, const Matrix& b) {
  Matrix p(a.rows(), b.rows());
  for (std::size_t m = 0; m < a.rows(); ++m)
    for (std::size_t c = 0; c < b.rows(); ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(m, k) * b(c, k);
      p(m, c) = s;
    }
  return p;
}

TEST(Heatmaps, SingleJointAtCenter) {
  std::vector<GridPoint> pts(1);
  pts[0].x = 1;
  pts[0].y = 1;
  pts[0].t = 1;
  const auto s = hard_heatmaps(pts, 1, 1, {0, 3, 3, 3});
  EXPECT_EQ(s.maps.dims(), (Dims{1, 3, 3, 3}));
  for (std::size_t i = 0; i < s.maps.size(); ++i)
    EXPECT_DOUBLE_EQ(s.maps[i], i == 13 ? 1.0 : 0.0);
}

TEST(Heatmaps, ChannelCountForThirteenJoints) {
  const auto cfg = net3d::c3d_full();
  JointTrack tr(13, 16, 112, 112);
  const auto s = make_heatmaps(tr, cfg, "conv5b", 16);
  EXPECT_EQ(s.channels(), 208u);
  EXPECT_EQ(s.channels() * 512, 106496u);
}

TEST(Heatmaps, EachChannelSumsToOne) {
  std::mt19937_64 rng(4);
  JointTrack tr(4, 16, 32, 32);
  std::uniform_real_distribution<double> d(0, 31);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t i = 0; i < 4; ++i) tr.at(i, t) = {d(rng), d(rng), true};
  const auto s = make_heatmaps(tr, net3d::c3d_mini(), "conv5b", 16);
  const std::size_t vol = s.volume();
  for (std::size_t m = 0; m < s.channels(); ++m) {
    double sum = 0.0;
    for (std::size_t k = 0; k < vol; ++k) {
      const double v = s.maps[m * vol + k];
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      sum += v;
    }
    EXPECT_EQ(sum, 1.0);
  }
}

TEST(Heatmaps, FrameMajorChannelOrder) {
  JointTrack tr(2, 16, 32, 32);
  tr.at(1, 15) = {31, 31, true};
  const auto s = make_heatmaps(tr, net3d::c3d_mini(), "conv5b", 16);
  // Frame 15 maps to t = 1; joint 1 at (31,31) maps to (1,1).
  EXPECT_DOUBLE_EQ(s.maps.at({heatmap_channel(15, 1, 2), 1, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(s.maps.at({heatmap_channel(15, 0, 2), 1, 0, 0}), 1.0);
}

TEST(Heatmaps, RejectsShortTrack) {
  EXPECT_THROW(make_heatmaps(JointTrack(1, 8, 32, 32), net3d::c3d_mini(), "conv5b", 16), ShapeError);
}

TEST(SamplePool, ConstantMapsBothNeighborhoods) {
  const Tensor f({3, 2, 4, 4}, 2.5);
  GridPoint p;
  p.x = 3;
  p.y = 0;
  p.t = 1;
  for (int n : {1, 3}) EXPECT_EQ(sample_pool(f, p, n), std::vector<double>(3, 2.5));
}

TEST(SamplePool, CornerCubeUsesOnlyInBoundsVoxels) {
  // Values encode position; the max over the 2x2x2 corner sub-cube is at (1,1,1).
  Tensor f({1, 4, 4, 4});
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = -double(i);
  f.at({0, 3, 3, 3}) = 100.0;  // outside the corner cube, must be ignored
  GridPoint p;
  const auto v = sample_pool(f, p, 3);
  EXPECT_DOUBLE_EQ(v[0], 0.0);
  f.at({0, 1, 1, 1}) = 7.0;
  EXPECT_DOUBLE_EQ(sample_pool(f, p, 3)[0], 7.0);
  f.at({0, 2, 0, 0}) = 9.0;  // two frames away
  EXPECT_DOUBLE_EQ(sample_pool(f, p, 3)[0], 7.0);
}

TEST(SamplePool, CubeMaxMatchesEnumeration) {
  std::mt19937_64 rng(12);
  const Tensor f = oracle::random_tensor({2, 3, 5, 5}, rng);
  for (const auto& p : random_points(40, {0, 3, 5, 5}, rng)) {
    const auto v = sample_pool(f, p, 3);
    for (std::size_t c = 0; c < 2; ++c) {
      double best = -1e300;
      for (long dt = -1; dt <= 1; ++dt)
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long t = long(p.t) + dt, y = long(p.y) + dy, x = long(p.x) + dx;
            if (t < 0 || t >= 3 || y < 0 || y >= 5 || x < 0 || x >= 5) continue;
            best = std::max(best, f.at({c, std::size_t(t), std::size_t(y), std::size_t(x)}));
          }
      EXPECT_EQ(v[c], best);
    }
  }
}

TEST(SamplePool, RejectsBadNeighborhoodAndPoint) {
  const Tensor f({1, 2, 2, 2});
  GridPoint p;
  EXPECT_THROW(sample_pool(f, p, 2), ConfigError);
  p.x = 2;
  EXPECT_THROW(sample_pool(f, p, 1), ShapeError);
}

TEST(Bilinear, OneHotRowsSelectColumns) {
  std::mt19937_64 rng(2);
  const Matrix b = oracle::random_matrix(3, 8, rng);
  Matrix a(2, 8);
  a(0, 5) = 1.0;
  a(1, 0) = 1.0;
  const Matrix p = bilinear_product(a, b);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(p(0, c), b(c, 5));
    EXPECT_EQ(p(1, c), b(c, 0));
  }
}

TEST(Bilinear, ZeroHeatmapsGiveZero) {
  std::mt19937_64 rng(2);
  const Matrix p = bilinear_product(Matrix(4, 8), oracle::random_matrix(3, 8, rng));
  EXPECT_EQ(p, Matrix(4, 3));
}

TEST(Bilinear, MatchesNaiveDoubleSum) {
  std::mt19937_64 rng(5);
  const Matrix a = oracle::random_matrix(4, 8, rng), b = oracle::random_matrix(3, 8, rng);
  EXPECT_EQ(bilinear_product(a, b), naive_bilinear(a, b));
}

TEST(Bilinear, RejectsMismatch) {
  EXPECT_THROW(bilinear_product(Matrix(2, 3), Matrix(2, 4)), ShapeError);
  EXPECT_THROW(bilinear_general_fwd(Matrix(2, 3), Matrix(4, 4), Matrix(2, 4)), ShapeError);
}

TEST(BilinearGeneral, IdentityReducesToProduct) {
  std::mt19937_64 rng(6);
  const Matrix a = oracle::random_matrix(4, 8, rng), b = oracle::random_matrix(3, 8, rng);
  EXPECT_EQ(bilinear_general_fwd(a, Matrix::identity(8), b), bilinear_product(a, b));
}

TEST(BilinearGeneral, ScaledIdentityDoubles) {
  std::mt19937_64 rng(6);
  const Matrix a = oracle::random_matrix(4, 8, rng), b = oracle::random_matrix(3, 8, rng);
  Matrix w = Matrix::identity(8);
  for (double& v : w.storage()) v *= 2.0;
  const Matrix p1 = bilinear_product(a, b), p2 = bilinear_general_fwd(a, w, b);
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(p2.storage()[i], 2.0 * p1.storage()[i]);
}

TEST(BilinearGeneral, MatchesChainedNaiveProducts) {
  std::mt19937_64 rng(9);
  const Matrix a = oracle::random_matrix(4, 6, rng), w = oracle::random_matrix(6, 5, rng),
               b = oracle::random_matrix(3, 5, rng);
  const Matrix aw = oracle::naive_matmul(a, w);
  EXPECT_EQ(bilinear_general_fwd(a, w, b), naive_bilinear(aw, b));
}

TEST(BilinearGeneral, LinearInEachArgument) {
  std::mt19937_64 rng(10);
  const Matrix a1 = oracle::random_matrix(3, 4, rng), a2 = oracle::random_matrix(3, 4, rng);
  const Matrix w1 = oracle::random_matrix(4, 5, rng), w2 = oracle::random_matrix(4, 5, rng);
  const Matrix b1 = oracle::random_matrix(2, 5, rng), b2 = oracle::random_matrix(2, 5, rng);
  auto add = [](const Matrix& x, const Matrix& y) {
    Matrix z = x;
    for (std::size_t i = 0; i < z.size(); ++i) z.storage()[i] += y.storage()[i];
    return z;
  };
  auto expect_superposed = [&](const Matrix& lhs, const Matrix& r1, const Matrix& r2) {
    for (std::size_t i = 0; i < lhs.size(); ++i)
      EXPECT_NEAR(lhs.storage()[i], r1.storage()[i] + r2.storage()[i], 1e-12);
  };
  expect_superposed(bilinear_general_fwd(add(a1, a2), w1, b1), bilinear_general_fwd(a1, w1, b1),
                    bilinear_general_fwd(a2, w1, b1));
  expect_superposed(bilinear_general_fwd(a1, add(w1, w2), b1), bilinear_general_fwd(a1, w1, b1),
                    bilinear_general_fwd(a1, w2, b1));
  expect_superposed(bilinear_general_fwd(a1, w1, add(b1, b2)), bilinear_general_fwd(a1, w1, b1),
                    bilinear_general_fwd(a1, w1, b2));
}

TEST(BilinearBackward, ZeroUpstreamGivesZero) {
  std::mt19937_64 rng(11);
  const Matrix a = oracle::random_matrix(3, 4, rng), w = oracle::random_matrix(4, 5, rng),
               b = oracle::random_matrix(2, 5, rng);
  const auto g = bilinear_general_bwd(Matrix(3, 2), a, w, b);
  EXPECT_EQ(g.d_a, Matrix(3, 4));
  EXPECT_EQ(g.d_w, Matrix(4, 5));
  EXPECT_EQ(g.d_b, Matrix(2, 5));
}

TEST(BilinearBackward, ShapesAndFiniteDifferences) {
  const auto r = gradcheck::bilinear();
  EXPECT_LT(r.rel_error, 1e-6);
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = 1 + rng() % 4, k1 = 1 + rng() % 5, k2 = 1 + rng() % 5, c = 1 + rng() % 3;
    const auto g = bilinear_general_bwd(oracle::random_matrix(m, c, rng),
                                        oracle::random_matrix(m, k1, rng),
                                        oracle::random_matrix(k1, k2, rng),
                                        oracle::random_matrix(c, k2, rng));
    EXPECT_EQ(g.d_w.rows(), k1);
    EXPECT_EQ(g.d_w.cols(), k2);
  }
}

TEST(HardPooling, BilinearEqualsSampling) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const VolumeShape s{5, 2, 3, 4};
    const Tensor f = oracle::random_tensor({s.c, s.l, s.h, s.w}, rng);
    const std::size_t n = 1 + rng() % 4, l = 1 + rng() % 3;
    const auto pts = random_points(n * l, s, rng);
    const PooledMatrix viaB = pool_bilinear(hard_heatmaps(pts, n, l, s), f);
    const PooledMatrix viaS = sample_pool_all(f, pts, n, l, 1);
    EXPECT_EQ(viaB.p, viaS.p);
  }
}

TEST(BilinearInit, IdentityWhenSquare) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(bilinear_init(5, 5, rng), Matrix::identity(5));
  const Matrix w = bilinear_init(3, 4, rng);
  for (double v : w.storage()) EXPECT_LE(std::abs(v), 1e-2);
}

TEST(PooledIo, RoundTripWithSidecar) {
  const auto dir = std::filesystem::temp_directory_path() / "jpool_poolgen_io";
  std::filesystem::remove_all(dir);
  PooledMatrix pm{Matrix(6, 2, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}), 3, 2, "conv5b"};
  write_pooled(dir / "p.jpt", pm);
  const PooledMatrix back = read_pooled(dir / "p.jpt");
  EXPECT_EQ(back.p, pm.p);
  EXPECT_EQ(back.n_joints, 3u);
  EXPECT_EQ(back.clip_len, 2u);
  EXPECT_EQ(back.layer, "conv5b");

  HeatMapStack hs{Tensor({2, 1, 2, 2}), 2, 1};
  hs.maps[3] = 1.0;
  write_heatmaps(dir / "h.jpt", hs, "conv5b");
  EXPECT_EQ(read_heatmaps(dir / "h.jpt").maps, hs.maps);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace jpool
