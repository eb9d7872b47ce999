#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "planereg/renderer.hpp"
#include "test_util.hpp"

using namespace planereg;
using planereg::testing::rel_err;

namespace {

Camera identity_camera(int w = 16, int h = 12) {
  Camera c;
  c.fx = c.fy = 20.0;
  c.cx = w / 2.0;
  c.cy = h / 2.0;
  c.width = w;
  c.height = h;
  c.rotation = Mat3::identity();
  return c;
}

VoxelField random_field(GridResolution res, Aabb box, std::uint64_t seed, double density_mean = 0.0) {
  VoxelField f = init_field(res, box, 0.0, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t i = 0; i < f.params().size(); ++i)
    f.params()[i] = (i % 4 == 0) ? density_mean + g(rng) : g(rng);
  return f;
}

}  // namespace

TEST(Rays, PrincipalAxis) {
  const Camera c = identity_camera();
  const Vec3 d = c.direction(c.cx, c.cy);
  EXPECT_NEAR(d.x, 0.0, 1e-15);
  EXPECT_NEAR(d.y, 0.0, 1e-15);
  EXPECT_NEAR(d.z, 1.0, 1e-15);
  // The pixel whose center is the principal point.
  const Ray r = pixel_ray(c, {8, 6}, {});
  EXPECT_NEAR(r.dir.x, 0.5 / 20.0 / norm(Vec3{0.5 / 20, 0.5 / 20, 1}), 1e-12);
  Camera odd = c;
  odd.cx = 8.5;
  odd.cy = 6.5;
  const Ray center = pixel_ray(odd, {8, 6}, {});
  EXPECT_NEAR(center.dir.z, 1.0, 1e-15);
}

TEST(Rays, PatchCountAndOrder) {
  Camera c = identity_camera(40, 30);
  const auto rays = rays_for_patch(c, {3, 5}, 20, {0.1, 9.0});
  ASSERT_EQ(rays.size(), 400u);
  for (const auto& r : rays) {
    EXPECT_NEAR(norm(r.dir), 1.0, 1e-12);
    EXPECT_EQ(r.t_near, 0.1);
    EXPECT_EQ(r.t_far, 9.0);
  }
  // Row-major: index 1 is one column right, index 20 one row down.
  EXPECT_GT(rays[1].dir.x, rays[0].dir.x);
  EXPECT_GT(rays[20].dir.y, rays[0].dir.y);
  const Ray ref = pixel_ray(c, {3 + 7, 5 + 11}, {0.1, 9.0});
  EXPECT_EQ(rays[11 * 20 + 7].dir, ref.dir);
}

TEST(Rays, TranslationMovesOriginsOnly) {
  Camera a = identity_camera(), b = a;
  b.translation = {1, -2, 3};
  const auto ra = rays_for_patch(a, {0, 0}, 4, {}), rb = rays_for_patch(b, {0, 0}, 4, {});
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(rb[i].origin, ra[i].origin + b.translation);
    EXPECT_EQ(rb[i].dir, ra[i].dir);
  }
}

TEST(Rays, PatchOutOfBounds) {
  const Camera c = identity_camera(16, 12);
  try {
    rays_for_patch(c, {0, 0}, 13, {});
    FAIL();
  } catch (const InputError& e) {
    EXPECT_STREQ(e.what(), "patch out of bounds");
  }
  EXPECT_THROW(rays_for_patch(c, {-1, 0}, 2, {}), InputError);
  EXPECT_NO_THROW(rays_for_patch(c, {4, 0}, 12, {}));
}

TEST(Camera, ValidateRejectsBadRotation) {
  Camera c = identity_camera();
  EXPECT_NO_THROW(c.validate());
  c.rotation(0, 0) = -1.0;  // reflection
  EXPECT_THROW(c.validate(), InputError);
  c = identity_camera();
  c.rotation(0, 1) = 0.1;
  EXPECT_THROW(c.validate(), InputError);
  c = identity_camera();
  c.fx = 0;
  EXPECT_THROW(c.validate(), InputError);
}

TEST(Sampling, Midpoints) {
  const Ray r{{}, {0, 0, 1}, 1.0, 5.0};
  const auto t = sample_ray(r, 4, false, 0);
  ASSERT_EQ(t.size(), 4u);
  EXPECT_DOUBLE_EQ(t[0], 1.5);
  EXPECT_DOUBLE_EQ(t[1], 2.5);
  EXPECT_DOUBLE_EQ(t[2], 3.5);
  EXPECT_DOUBLE_EQ(t[3], 4.5);
}

TEST(Sampling, StratifiedDeterministicAndInBins) {
  const Ray r{{}, {0, 0, 1}, 0.5, 7.0};
  EXPECT_EQ(sample_ray(r, 16, true, 42), sample_ray(r, 16, true, 42));
  EXPECT_NE(sample_ray(r, 16, true, 42), sample_ray(r, 16, true, 43));
  const double w = (r.t_far - r.t_near) / 16;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto t = sample_ray(r, 16, true, seed);
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_GE(t[i], r.t_near + static_cast<double>(i) * w);
      EXPECT_LT(t[i], r.t_near + static_cast<double>(i + 1) * w);
      if (i > 0) {
        EXPECT_GT(t[i], t[i - 1]);
      }
    }
  }
}

TEST(Sampling, RejectsTooFew) { EXPECT_THROW(sample_ray(Ray{}, 1, false, 0), InputError); }

TEST(RenderRay, EmptySpace) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  VoxelField f = init_field({4, 4, 4}, box, 0.0, 0);
  for (std::size_t n = 0; n < f.node_count(); ++n) f.density_raw(n) = -800.0;  // softplus underflows to 0
  const Ray r{{0, 0, -2}, {0, 0, 1}, 0.05, 4.0};
  const auto res = render_ray(f, r, sample_ray(r, 32));
  EXPECT_EQ(res.color, Vec3{});
  EXPECT_EQ(res.depth, 0.0);
  EXPECT_EQ(res.transmittance_final, 1.0);
}

TEST(RenderRay, OpaqueSampleTakesEverything) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  VoxelField f = init_field({3, 3, 3}, box, -800.0, 0);
  // Only the center node is dense: the sample exactly at the center sees raw 1e4.
  const std::size_t c = f.node_index(1, 1, 1);
  f.density_raw(c) = 1e4;
  f.color_raw(c, 0) = 3.0;
  const Ray r{{0, 0, -2}, {0, 0, 1}, 0.05, 4.0};
  const std::vector<double> t{1.0, 2.0, 3.0};
  const auto res = render_ray(f, r, t);
  EXPECT_NEAR(res.depth, 2.0, 1e-9);
  EXPECT_NEAR(res.color.x, sigmoid(3.0), 1e-9);
  EXPECT_NEAR(res.transmittance_final, 0.0, 1e-12);
}

TEST(RenderRay, ConservationAndMonotoneTransmittance) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  const auto f = random_field({6, 6, 6}, box, 3, 0.5);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int i = 0; i < 500; ++i) {
    const Vec3 dir = normalized(Vec3{g(rng), g(rng), g(rng)});
    const Ray r{-2.0 * dir + 0.3 * Vec3{g(rng), g(rng), g(rng)}, dir, 0.05, 4.5};
    const auto trace = trace_ray(f, r, sample_ray(r, 48, true, static_cast<std::uint64_t>(i)));
    double sum = trace.result.transmittance_final;
    double prev_t = 1.0;
    for (std::size_t k = 0; k < trace.samples.size(); ++k) {
      EXPECT_GE(trace.result.weights[k], 0.0);
      EXPECT_LE(trace.samples[k].transmittance, prev_t);
      prev_t = trace.samples[k].transmittance;
      sum += trace.result.weights[k];
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    const double opacity = 1.0 - trace.result.transmittance_final;
    if (opacity > 1e-9) {
      const double mean_t = trace.result.depth / opacity;
      EXPECT_GE(mean_t, r.t_near - 1e-9);
      EXPECT_LE(mean_t, r.t_far + 1e-9);
    }
  }
}

TEST(RenderRay, HomogeneousMediumTransmittance) {
  const Aabb box{{-10, -10, -10}, {10, 10, 10}};
  const double sigma0 = 0.3;
  VoxelField f = init_field({3, 3, 3}, box, std::log(std::expm1(sigma0)), 0);
  const Ray r{{0, 0, 0}, {0, 0, 1}, 0.5, 6.0};
  const auto res = render_ray(f, r, sample_ray(r, 1024));
  EXPECT_NEAR(res.transmittance_final, std::exp(-sigma0 * (r.t_far - r.t_near)), 1e-3);
}

TEST(RenderRay, OpaquePlaneDepthWithinOneSample) {
  // Wall at y = 2.025 (midway between node rows), camera at the origin looking along +y.
  const Aabb box{{-1, 0, -1}, {1, 4, 1}};
  VoxelField f = init_field({41, 81, 41}, box, 0.0, 0);
  const double wall = 2.025;
  for (int k = 0; k < 41; ++k)
    for (int j = 0; j < 81; ++j)
      for (int i = 0; i < 41; ++i) f.density_raw(f.node_index(i, j, k)) = f.node_position(i, j, k).y > wall ? 200.0 : -200.0;
  Camera cam = identity_camera(9, 9);
  cam.rotation = Mat3::from_columns({1, 0, 0}, {0, 0, -1}, {0, 1, 0});  // forward = +y
  const RayBounds bounds{0.05, 4.0};
  const int n = 64;
  const double spacing = (bounds.t_far - bounds.t_near) / n;
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) {
      const Ray r = pixel_ray(cam, {x, y}, bounds);
      const auto res = render_ray(f, r, sample_ray(r, n));
      const double truth = wall / r.dir.y;
      EXPECT_LT(std::abs(res.depth - truth), spacing) << x << "," << y;
    }
}

TEST(RenderBackward, ZeroCotangentsLeaveAccumulator) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  const auto f = random_field({5, 5, 5}, box, 4);
  ParamGrad g(f);
  const Ray r{{0, 0, -2}, {0, 0, 1}, 0.05, 4.0};
  render_ray_backward(f, r, sample_ray(r, 16), {}, 0.0, g);
  for (double v : g.values) EXPECT_EQ(v, 0.0);
}

TEST(RenderBackward, DepthRespondsToMassInEmptyField) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  VoxelField f = init_field({5, 5, 5}, box, -800.0, 0);
  for (std::size_t n = 0; n < f.node_count(); ++n) f.density_raw(n) = -20.0;  // sigma ~ 2e-9, gradient still alive
  ParamGrad g(f);
  const Ray r{{0, 0, -2}, {0, 0, 1}, 0.05, 4.0};
  render_ray_backward(f, r, sample_ray(r, 16), {}, 1.0, g);
  double total = 0;
  for (std::size_t n = 0; n < f.node_count(); ++n) total += std::abs(g.density_grad(n));
  EXPECT_GT(total, 0.0);
}

TEST(RenderBackward, MatchesFiniteDifferences) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_field({8, 8, 8}, box, 100 + static_cast<std::uint64_t>(trial), 0.0);
    const Vec3 dir = normalized(Vec3{0.3 * g(rng), 0.3 * g(rng), 1.0});
    const Ray r{{0.2 * g(rng), 0.2 * g(rng), -1.5}, dir, 0.05, 3.5};
    const auto t = sample_ray(r, 16, true, static_cast<std::uint64_t>(trial));
    const Vec3 dc{g(rng), g(rng), g(rng)};
    const double dd = g(rng);
    auto objective = [&](const VoxelField& field) {
      const auto res = render_ray(field, r, t);
      return dot(dc, res.color) + dd * res.depth;
    };
    ParamGrad grad(f);
    render_ray_backward(f, r, t, dc, dd, grad);
    const double h = 1e-5;
    for (std::size_t i = 0; i < f.params().size(); ++i) {
      const double keep = f.params()[i];
      f.params()[i] = keep + h;
      const double up = objective(f);
      f.params()[i] = keep - h;
      const double dn = objective(f);
      f.params()[i] = keep;
      const double fd = (up - dn) / (2 * h);
      if (grad.values[i] == 0.0 && fd == 0.0) continue;
      ASSERT_LT(rel_err(grad.values[i], fd, 1e-6), 1e-3) << "param " << i << " trial " << trial;
    }
  }
}

TEST(RenderImage, EmptyFieldIsBlack) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  VoxelField f = init_field({4, 4, 4}, box, -800.0, 0);
  Camera cam = identity_camera(160, 120);
  cam.translation = {0, 0, -3};
  const auto img = render_image(f, cam, 8, {0.05, 6.0});
  EXPECT_EQ(img.color.data.size(), 19200u);
  for (const auto& c : img.color.data) EXPECT_EQ(c, Vec3{});
  for (double d : img.depth.data) EXPECT_EQ(d, 0.0);
}

TEST(RenderImage, EqualsPerPixelLoop) {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  const auto f = random_field({6, 6, 6}, box, 6);
  Camera cam = identity_camera(24, 18);
  cam.translation = {0.1, -0.2, -2.5};
  const RayBounds bounds{0.05, 5.0};
  for (bool stratified : {false, true}) {
    for (int workers : {1, 3}) {
      const auto img = render_image(f, cam, 24, bounds, stratified, 77, workers);
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
          const Ray r = pixel_ray(cam, {x, y}, bounds);
          const auto res = render_ray(f, r, sample_ray(r, 24, stratified, 77 + img.color.index(x, y)));
          EXPECT_EQ(img.color.at(x, y), res.color);
          EXPECT_EQ(img.depth.at(x, y), res.depth);
        }
    }
  }
}
