#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "planereg/losses.hpp"
#include "test_util.hpp"

using namespace planereg;
using planereg::testing::rel_err;

namespace {

std::vector<Vec3> random_patch(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec3> p(static_cast<std::size_t>(n));
  for (auto& v : p) v = {u(rng), u(rng), u(rng)};
  return p;
}

std::vector<Vec3> constant_patch(int n, double v) { return std::vector<Vec3>(static_cast<std::size_t>(n), Vec3{v, v, v}); }

Camera pinhole(int side) {
  Camera c;
  c.fx = c.fy = 2.0 * side;
  c.cx = c.cy = side / 2.0;
  c.width = c.height = side;
  c.rotation = Mat3::identity();
  return c;
}

// Depth where each ray meets the plane n.p = d.
std::vector<double> plane_depths(std::span<const Ray> rays, Vec3 n, double d) {
  std::vector<double> out;
  for (const auto& r : rays) out.push_back((d - dot(n, r.origin)) / dot(n, r.dir));
  return out;
}

SemanticGroups ground_groups() { return {{{"ground", {0, 1, 2}}, {"building", {3}}}}; }

}  // namespace

TEST(MseLoss, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  auto x = random_patch(rng, 16);
  EXPECT_EQ(mse_loss(x, x).value, 0.0);
}

TEST(MseLoss, ZeroVersusOne) {
  EXPECT_DOUBLE_EQ(mse_loss(constant_patch(9, 0.0), constant_patch(9, 1.0)).value, 1.0);
}

TEST(MseLoss, MatchesSummation) {
  std::mt19937_64 rng(2);
  auto x = random_patch(rng, 25), y = random_patch(rng, 25);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int c = 0; c < 3; ++c) s += (x[i][c] - y[i][c]) * (x[i][c] - y[i][c]);
  EXPECT_NEAR(mse_loss(x, y).value, s / 75.0, 1e-12);
}

TEST(MseLoss, ShapeMismatchThrows) {
  EXPECT_THROW(mse_loss(constant_patch(4, 0), constant_patch(9, 0)), InputError);
}

TEST(Ssim, SelfIsOne) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 10; ++k) {
    auto x = random_patch(rng, 25);
    EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  }
  EXPECT_NEAR(ssim(constant_patch(4, 0.3), constant_patch(4, 0.3)), 1.0, 1e-12);
}

TEST(Ssim, BlackVersusWhite) {
  // means 0 and 1, no variance: (c1)(c2) / ((1 + c1)(c2))
  const double expected = 1e-4 / (1.0 + 1e-4);
  EXPECT_NEAR(ssim(constant_patch(16, 0.0), constant_patch(16, 1.0)), expected, 1e-15);
  EXPECT_NEAR(expected, 9.999e-5, 1e-8);
}

TEST(Ssim, Symmetric) {
  std::mt19937_64 rng(4);
  for (int k = 0; k < 100; ++k) {
    auto x = random_patch(rng, 16), y = random_patch(rng, 16);
    EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-14);
  }
}

TEST(Ssim, MatchesDirectFormula) {
  std::mt19937_64 rng(5);
  auto x = random_patch(rng, 25), y = random_patch(rng, 25);
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < 25; ++i) mx += x[i][c], my += y[i][c];
    mx /= 25, my /= 25;
    double vx = 0, vy = 0, cxy = 0;
    for (std::size_t i = 0; i < 25; ++i) {
      vx += (x[i][c] - mx) * (x[i][c] - mx);
      vy += (y[i][c] - my) * (y[i][c] - my);
      cxy += (x[i][c] - mx) * (y[i][c] - my);
    }
    vx /= 25, vy /= 25, cxy /= 25;
    total += (2 * mx * my + 1e-4) * (2 * cxy + 9e-4) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
  }
  EXPECT_NEAR(ssim(x, y), total / 3, 1e-12);
}

TEST(DssimLoss, IdenticalIsZero) {
  std::mt19937_64 rng(6);
  auto x = random_patch(rng, 16);
  EXPECT_NEAR(dssim_loss(x, x).value, 0.0, 1e-14);
}

TEST(DssimLoss, BlackVersusWhite) {
  EXPECT_NEAR(dssim_loss(constant_patch(16, 0.0), constant_patch(16, 1.0)).value, (1.0 - 1e-4 / (1 + 1e-4)) / 2, 1e-15);
}

TEST(DssimLoss, BoundedOnRandomPairs) {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 200; ++k) {
    auto x = random_patch(rng, 9), y = random_patch(rng, 9);
    const double v = dssim_loss(x, y).value;
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(DssimLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_patch(rng, 25), y = random_patch(rng, 25);
    const auto res = dssim_loss(x, y);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (int c = 0; c < 3; ++c) {
        auto xp = x, xm = x;
        xp[i][c] += h;
        xm[i][c] -= h;
        const double fd = (dssim_loss(xp, y).value - dssim_loss(xm, y).value) / (2 * h);
        EXPECT_LT(rel_err(res.gradient[i * 3 + static_cast<std::size_t>(c)], fd, 1e-4), 1e-5) << i << "," << c;
      }
    }
  }
}

TEST(SvdPlaneLoss, ExactPlaneIsZero) {
  const auto cam = pinhole(6);
  const auto rays = rays_for_patch(cam, {0, 0}, 6, {0.05, 100.0});
  const auto depths = plane_depths(rays, normalized(Vec3{0.2, -0.9, -0.3}), -4.0);
  EXPECT_LT(svd_plane_loss(depths, rays).value, 1e-12);
}

TEST(SvdPlaneLoss, SlantDiscriminatesFromDepthSmoothness) {
  const auto cam = pinhole(5);
  const auto rays = rays_for_patch(cam, {0, 0}, 5, {0.05, 100.0});
  // Depth is distance along unit rays, so only constant depth zeroes the
  // smoothness term; a frontoparallel plane comes close, a slanted one does not.
  EXPECT_EQ(depth_smoothness_loss(std::vector<double>(rays.size(), 3.0)).value, 0.0);

  const auto fronto = plane_depths(rays, {0, 0, 1}, 3.0);
  EXPECT_LT(svd_plane_loss(fronto, rays).value, 1e-12);

  const double a = 30.0 * std::numbers::pi / 180.0;
  const auto slanted = plane_depths(rays, {0, std::sin(a), std::cos(a)}, 3.0);
  EXPECT_LT(svd_plane_loss(slanted, rays).value, 1e-12);

  const double ds_fronto = depth_smoothness_loss(fronto).value;
  const double ds_slanted = depth_smoothness_loss(slanted).value;
  EXPECT_GT(ds_slanted, 1e-3);
  EXPECT_GT(ds_slanted, 20.0 * ds_fronto);
}

TEST(SvdPlaneLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(1.0, 3.0);
  const auto cam = pinhole(4);
  const auto rays = rays_for_patch(cam, {0, 0}, 4, {0.05, 100.0});
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> d(rays.size());
    for (auto& v : d) v = u(rng);
    const auto res = svd_plane_loss(d, rays);
    if (res.ill_conditioned) continue;
    const double h = 1e-6;
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto dp = d, dm = d;
      dp[i] += h;
      dm[i] -= h;
      const double fd = (svd_plane_loss(dp, rays).value - svd_plane_loss(dm, rays).value) / (2 * h);
      EXPECT_LT(rel_err(res.gradient[i], fd, 1e-6), 1e-4);
    }
    ++checked;
  }
  EXPECT_GT(checked, 10);
}

TEST(SvdPlaneLoss, RigidTransformInvariant) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(1.0, 3.0);
  const auto cam = pinhole(4);
  auto rays = rays_for_patch(cam, {0, 0}, 4, {0.05, 100.0});
  std::vector<double> d(rays.size());
  for (auto& v : d) v = u(rng);
  const double base = svd_plane_loss(d, rays).value;
  const Mat3 rot = planereg::testing::random_rotation(rng);
  const Vec3 shift{3.0, -7.0, 1.5};
  for (auto& r : rays) {
    r.origin = rot * r.origin + shift;
    r.dir = rot * r.dir;
  }
  EXPECT_LT(rel_err(svd_plane_loss(d, rays).value, base), 1e-9);
}

TEST(SvdPlaneLoss, DescentReducesSigma3) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> noise(0.0, 0.05);
  const auto cam = pinhole(8);
  const auto rays = rays_for_patch(cam, {0, 0}, 8, {0.05, 100.0});
  auto d = plane_depths(rays, normalized(Vec3{0, -1, -0.4}), -1.0);
  for (auto& v : d) v += noise(rng);
  double prev = svd_plane_loss(d, rays).value;
  const double start = prev;
  for (int step = 0; step < 100; ++step) {
    const auto res = svd_plane_loss(d, rays);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 1e-3 * res.gradient[i];
    const double now = svd_plane_loss(d, rays).value;
    EXPECT_LE(now, prev);
    prev = now;
  }
  EXPECT_LT(prev, start);
}

TEST(SvdPlaneLoss, SizeMismatchThrows) {
  const auto rays = rays_for_patch(pinhole(2), {0, 0}, 2, {0.05, 10.0});
  EXPECT_THROW(svd_plane_loss(std::vector<double>(3, 1.0), rays), InputError);
}

TEST(DepthSmoothness, ConstantIsZero) {
  EXPECT_EQ(depth_smoothness_loss(std::vector<double>(16, 2.5)).value, 0.0);
}

TEST(DepthSmoothness, TwoByTwoExample) {
  // only pixel (0,0) has both a lower and a right neighbor inside the bound
  EXPECT_DOUBLE_EQ(depth_smoothness_loss(std::vector<double>{1, 2, 3, 4}).value, 5.0);
}

TEST(DepthSmoothness, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::vector<double> d(36);
  for (auto& v : d) v = u(rng);
  const auto res = depth_smoothness_loss(d);
  const double h = 1e-5;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto dp = d, dm = d;
    dp[i] += h;
    dm[i] -= h;
    const double fd = (depth_smoothness_loss(dp).value - depth_smoothness_loss(dm).value) / (2 * h);
    EXPECT_LT(rel_err(res.gradient[i], fd, 1e-6), 1e-6) << i;
  }
}

TEST(DepthSmoothness, NonSquareThrows) {
  EXPECT_THROW(depth_smoothness_loss(std::vector<double>(5, 0.0)), InputError);
}

TEST(PatchEligible, AllRoad) {
  const std::vector<int> sem(16, 0);
  const auto e = patch_eligible(sem, ground_groups());
  EXPECT_TRUE(e.eligible);
  ASSERT_TRUE(e.group.has_value());
  EXPECT_EQ(*e.group, 0u);
}

TEST(PatchEligible, RoadAndBuildingRejected) {
  std::vector<int> sem(16, 0);
  sem[5] = 3;
  EXPECT_FALSE(patch_eligible(sem, ground_groups()).eligible);
}

TEST(PatchEligible, RoadAndLaneAccepted) {
  std::vector<int> sem(16, 0);
  sem[3] = sem[7] = 1;
  EXPECT_TRUE(patch_eligible(sem, ground_groups()).eligible);
}

TEST(PatchEligible, UngroupedClassRejected) {
  EXPECT_FALSE(patch_eligible(std::vector<int>(4, 9), ground_groups()).eligible);
}

TEST(SemanticGroups, OverlapRejected) {
  SemanticGroups g{{{"a", {0, 1}}, {"b", {1, 2}}}};
  EXPECT_THROW(g.validate(), InputError);
  EXPECT_NO_THROW(ground_groups().validate());
}

class TotalLossTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(13);
    rays = rays_for_patch(pinhole(4), {0, 0}, 4, {0.05, 100.0});
    pred = random_patch(rng, 16);
    gt = random_patch(rng, 16);
    std::uniform_real_distribution<double> u(1.0, 3.0);
    depth.resize(16);
    for (auto& v : depth) v = u(rng);
  }
  PatchLoss run(const std::vector<int>& sem, int epoch, GeometryRegularizer reg = GeometryRegularizer::kPlaneSvd) {
    return total_loss({pred, depth, rays}, {gt, sem}, LossWeights{}, epoch, ground_groups(), reg);
  }
  std::vector<Ray> rays;
  std::vector<Vec3> pred, gt;
  std::vector<double> depth;
};

TEST_F(TotalLossTest, DefaultWeights) {
  const LossWeights w;
  EXPECT_EQ(w.lambda0, 0.1);
  EXPECT_EQ(w.lambda1, 0.01);
  EXPECT_EQ(w.svd_delay_epochs, 1);
}

TEST_F(TotalLossTest, DelayedDuringFirstEpoch) {
  const auto r = run(std::vector<int>(16, 0), 0);
  EXPECT_TRUE(r.breakdown.eligible);
  EXPECT_EQ(r.breakdown.lambda1_effective, 0.0);
  EXPECT_NEAR(r.breakdown.total, r.breakdown.mse + 0.1 * r.breakdown.dssim, 1e-12);
  for (double g : r.d_depth) EXPECT_EQ(g, 0.0);
}

TEST_F(TotalLossTest, AppliedAfterDelay) {
  const auto r = run(std::vector<int>(16, 0), 1);
  EXPECT_EQ(r.breakdown.lambda1_effective, 0.01);
  EXPECT_GT(r.breakdown.svd, 0.0);
  EXPECT_NEAR(r.breakdown.total, r.breakdown.mse + 0.1 * r.breakdown.dssim + 0.01 * r.breakdown.svd, 1e-9);
  const auto direct = svd_plane_loss(depth, rays);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(r.d_depth[i], 0.01 * direct.gradient[i], 1e-15);
}

TEST_F(TotalLossTest, IneligibleSkipsRegularizer) {
  std::vector<int> sem(16, 0);
  sem[0] = 3;
  const auto r = run(sem, 5);
  EXPECT_FALSE(r.breakdown.eligible);
  EXPECT_EQ(r.breakdown.svd, 0.0);
  EXPECT_NEAR(r.breakdown.total, r.breakdown.mse + 0.1 * r.breakdown.dssim, 1e-12);
}

TEST_F(TotalLossTest, ColorGradientCombinesTerms) {
  const auto r = run(std::vector<int>(16, 0), 2);
  const auto m = mse_loss(pred, gt);
  const auto d = dssim_loss(pred, gt);
  for (std::size_t i = 0; i < 16; ++i)
    for (int c = 0; c < 3; ++c) {
      const auto k = i * 3 + static_cast<std::size_t>(c);
      EXPECT_NEAR(r.d_rgb[i][c], m.gradient[k] + 0.1 * d.gradient[k], 1e-14);
    }
}

TEST_F(TotalLossTest, DepthSmoothnessBaseline) {
  const auto r = run(std::vector<int>(16, 0), 2, GeometryRegularizer::kDepthSmoothness);
  ASSERT_TRUE(r.breakdown.ds_baseline.has_value());
  EXPECT_NEAR(*r.breakdown.ds_baseline, depth_smoothness_loss(depth).value, 1e-12);
  EXPECT_NEAR(r.breakdown.total, r.breakdown.mse + 0.1 * r.breakdown.dssim + 0.01 * *r.breakdown.ds_baseline, 1e-9);
}

TEST_F(TotalLossTest, ShapeMismatchThrows) {
  EXPECT_THROW(run(std::vector<int>(15, 0), 1), InputError);
}
