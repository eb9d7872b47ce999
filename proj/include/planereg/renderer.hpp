// Pinhole ray generation and alpha-compositing volume rendering of color and
// expected depth, with the exact reverse pass into the voxel field.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "planereg/error.hpp"
#include "planereg/image.hpp"
#include "planereg/parallel.hpp"
#include "planereg/scenefield.hpp"
#include "planereg/vec3.hpp"

namespace planereg {

/// Pinhole camera. Camera frame: x right, y down, z forward.
/// `rotation`/`translation` map camera coordinates to world coordinates.
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  Mat3 rotation;
  Vec3 translation;

  Vec3 center() const { return translation; }

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw InputError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InputError("camera image size must be positive");
    const Mat3 rtr = rotation.transposed() * rotation;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        if (std::abs(rtr(r, c) - (r == c ? 1.0 : 0.0)) > 1e-9) throw InputError("camera rotation is not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > 1e-9) throw InputError("camera rotation is not a proper rotation");
  }

  /// World-frame unit direction through continuous pixel position (u, v).
  Vec3 direction(double u, double v) const {
    return normalized(rotation * Vec3{(u - cx) / fx, (v - cy) / fy, 1.0});
  }
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
  double t_near = 0.05;
  double t_far = 1.0;
};

struct RayBounds {
  double t_near = 0.05;
  double t_far = 1.0;
};

/// Integer pixel position; x is the column, y the row.
struct Pixel {
  int x = 0;
  int y = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

inline Ray pixel_ray(const Camera& camera, Pixel px, RayBounds bounds) {
  return {camera.center(), camera.direction(px.x + 0.5, px.y + 0.5), bounds.t_near, bounds.t_far};
}

/// Rays through every pixel center of a square patch, row-major.
inline std::vector<Ray> rays_for_patch(const Camera& camera, Pixel top_left, int patch_size, RayBounds bounds) {
  if (patch_size <= 0 || top_left.x < 0 || top_left.y < 0 || top_left.x + patch_size > camera.width ||
      top_left.y + patch_size > camera.height)
    throw InputError("patch out of bounds");
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(patch_size) * static_cast<std::size_t>(patch_size));
  for (int r = 0; r < patch_size; ++r)
    for (int c = 0; c < patch_size; ++c) rays.push_back(pixel_ray(camera, {top_left.x + c, top_left.y + r}, bounds));
  return rays;
}

/// Bin midpoints, or one uniform draw per bin when stratified.
inline std::vector<double> sample_ray(const Ray& ray, int n_samples, bool stratified, std::mt19937_64& rng) {
  if (n_samples < 2) throw InputError("at least 2 samples per ray are required");
  std::vector<double> t(static_cast<std::size_t>(n_samples));
  const double width = (ray.t_far - ray.t_near) / n_samples;
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  for (int i = 0; i < n_samples; ++i) {
    const double offset = stratified ? jitter(rng) : 0.5;
    t[static_cast<std::size_t>(i)] = ray.t_near + (i + offset) * width;
  }
  return t;
}

inline std::vector<double> sample_ray(const Ray& ray, int n_samples, bool stratified = false, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  return sample_ray(ray, n_samples, stratified, rng);
}

struct RenderResult {
  Vec3 color;
  double depth = 0.0;
  std::vector<double> weights;
  double transmittance_final = 1.0;
  std::vector<double> sample_t;
};

/// Per-sample forward state kept for the reverse pass.
struct SampleState {
  Stencil stencil;
  std::array<double, 4> raw{};
  double sigma = 0.0;
  Vec3 rgb;
  double t = 0.0;
  double delta = 0.0;
  double alpha = 0.0;
  double transmittance = 1.0;  // before this sample
  double weight = 0.0;
};

struct RayTrace {
  RenderResult result;
  std::vector<SampleState> samples;
};

namespace detail {

inline double sample_delta(std::span<const double> t, std::size_t i, double t_far) {
  return i + 1 < t.size() ? t[i + 1] - t[i] : t_far - t[i];
}

}  // namespace detail

/// Forward pass that keeps every sample's state for a later backward call.
inline RayTrace trace_ray(const VoxelField& field, const Ray& ray, std::span<const double> sample_t) {
  RayTrace trace;
  auto& res = trace.result;
  res.sample_t.assign(sample_t.begin(), sample_t.end());
  res.weights.resize(sample_t.size());
  trace.samples.resize(sample_t.size());
  double transmittance = 1.0;
  for (std::size_t i = 0; i < sample_t.size(); ++i) {
    auto& s = trace.samples[i];
    s.t = sample_t[i];
    s.delta = detail::sample_delta(sample_t, i, ray.t_far);
    s.stencil = field.locate(ray.origin + s.t * ray.dir);
    s.transmittance = transmittance;
    if (s.stencil.inside) {
      s.raw = field.interpolate(s.stencil);
      const FieldSample fs = activate(s.raw);
      s.sigma = fs.sigma;
      s.rgb = fs.rgb;
      s.alpha = 1.0 - std::exp(-s.sigma * s.delta);
      s.weight = transmittance * s.alpha;
      transmittance *= 1.0 - s.alpha;
    }
    res.weights[i] = s.weight;
    res.color += s.weight * s.rgb;
    res.depth += s.weight * s.t;
  }
  res.transmittance_final = transmittance;
  return trace;
}

inline RenderResult render_ray(const VoxelField& field, const Ray& ray, std::span<const double> sample_t) {
  return trace_ray(field, ray, sample_t).result;
}

/// Accumulates the gradient of d_color . color + d_depth . depth into `accum`.
///
/// With e_i = d_color . c_i + d_depth * t_i the loss is sum_i w_i e_i, and
/// dL/dsigma_k = delta_k (T_{k+1} e_k - sum_{i>k} w_i e_i).
inline void backward_trace(const RayTrace& trace, const Vec3& d_color, double d_depth, ParamGrad& accum) {
  const auto& samples = trace.samples;
  double suffix = 0.0;  // sum_{i>k} w_i e_i
  for (std::size_t idx = samples.size(); idx-- > 0;) {
    const auto& s = samples[idx];
    if (!s.stencil.inside) continue;
    const double e = dot(d_color, s.rgb) + d_depth * s.t;
    const double t_next = s.transmittance * (1.0 - s.alpha);
    const double d_sigma = s.delta * (t_next * e - suffix);
    suffix += s.weight * e;
    scatter_backward(s.stencil, s.raw, d_sigma, s.weight * d_color, accum);
  }
}

inline void render_ray_backward(const VoxelField& field, const Ray& ray, std::span<const double> sample_t,
                                const Vec3& d_color, double d_depth, ParamGrad& accum) {
  if (!accum.matches(field)) throw InputError("gradient buffer shape does not match field");
  if (d_color == Vec3{} && d_depth == 0.0) return;
  backward_trace(trace_ray(field, ray, sample_t), d_color, d_depth, accum);
}

struct RenderedImage {
  ColorImage color;
  DepthImage depth;
};

inline RenderedImage render_image(const VoxelField& field, const Camera& camera, int n_samples, RayBounds bounds,
                                  bool stratified = false, std::uint64_t seed = 0, int workers = 1) {
  RenderedImage out{ColorImage(camera.width, camera.height), DepthImage(camera.width, camera.height)};
  parallel_for(static_cast<std::size_t>(camera.height), workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t y = begin; y < end; ++y) {
      for (int x = 0; x < camera.width; ++x) {
        const Ray ray = pixel_ray(camera, {x, static_cast<int>(y)}, bounds);
        const auto t = sample_ray(ray, n_samples, stratified, seed + out.color.index(x, static_cast<int>(y)));
        const RenderResult r = render_ray(field, ray, t);
        out.color.at(x, static_cast<int>(y)) = r.color;
        out.depth.at(x, static_cast<int>(y)) = r.depth;
      }
    }
  });
  return out;
}

}  // namespace planereg
