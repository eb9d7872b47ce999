// Least-squares plane regression through the smallest singular value of the
// centered point matrix, its gradient with respect to the points, and a
// RANSAC plane estimator used by the evaluation metrics.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "planereg/error.hpp"
#include "planereg/vec3.hpp"

namespace planereg {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<int> labels;  // empty, or one class id per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_labels() const { return !labels.empty(); }
};

struct PlaneFit {
  Vec3 centroid;
  Vec3 normal{0, 0, 1};
  double sigma3 = 0.0;
  std::array<double, 3> singular_values{};  // descending
};

struct RansacParams {
  int iterations = 256;
  double inlier_threshold = 0.05;  // meters
  double min_inlier_fraction = 0.5;
  std::uint64_t seed = 0;
};

struct RansacFit {
  PlaneFit plane;
  std::vector<bool> inliers;
  std::size_t n_inliers = 0;
};

/// Eigen-decomposition of a symmetric 3x3 matrix.
/// `values` are sorted descending and `vectors[i]` is the unit eigenvector of `values[i]`.
struct SymmetricEigen3 {
  std::array<double, 3> values{};
  std::array<Vec3, 3> vectors{};
};

/// Cyclic Jacobi rotations; stops once the off-diagonal mass falls below
/// 1e-14 relative to the matrix norm, or after 30 sweeps.
inline SymmetricEigen3 symmetric_eigen(const Mat3& input) {
  Mat3 a = input;
  Mat3 v = Mat3::identity();

  double frob = 0.0;
  for (double e : a.m) frob += e * e;
  const double tol = 1e-14 * std::sqrt(frob);

  for (int sweep = 0; sweep < 30; ++sweep) {
    const double off = std::sqrt(2.0 * (a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2)));
    if (off <= tol) break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < 3; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < 3; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < 3; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) > a(j, j); });
  SymmetricEigen3 out;
  for (int i = 0; i < 3; ++i) {
    out.values[static_cast<std::size_t>(i)] = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
    out.vectors[static_cast<std::size_t>(i)] = normalized(v.column(order[static_cast<std::size_t>(i)]));
  }
  return out;
}

/// Flips `n` so that it points up (+z), tie-broken by +y then +x.
inline Vec3 canonical_normal(Vec3 n) {
  const double s = n.z != 0.0 ? n.z : (n.y != 0.0 ? n.y : n.x);
  return s < 0.0 ? -n : n;
}

inline Vec3 barycenter(std::span<const Vec3> points) {
  if (points.empty()) throw InputError("empty point set");
  Vec3 sum;
  for (const auto& p : points) sum += p;
  return sum / static_cast<double>(points.size());
}
inline Vec3 barycenter(const PointCloud& cloud) { return barycenter(cloud.points); }

namespace detail {

struct CenteredDecomposition {
  Vec3 centroid;
  SymmetricEigen3 eig;
  std::array<double, 3> sigma{};
};

inline CenteredDecomposition decompose_centered(std::span<const Vec3> points) {
  if (points.size() < 3) throw InputError("underdetermined plane");
  CenteredDecomposition d;
  d.centroid = barycenter(points);
  Mat3 ata{{0, 0, 0, 0, 0, 0, 0, 0, 0}};
  for (const auto& p : points) {
    const Vec3 q = p - d.centroid;
    for (int r = 0; r < 3; ++r)
      for (int c = r; c < 3; ++c) ata(r, c) += q[r] * q[c];
  }
  ata(1, 0) = ata(0, 1);
  ata(2, 0) = ata(0, 2);
  ata(2, 1) = ata(1, 2);
  d.eig = symmetric_eigen(ata);

  // sigma_i = |A v_i|. Evaluated directly rather than as sqrt(lambda_i) so the
  // smallest value keeps full relative precision for nearly coplanar sets.
  for (std::size_t i = 0; i < 3; ++i) {
    double ss = 0.0;
    for (const auto& p : points) {
      const double r = dot(p - d.centroid, d.eig.vectors[i]);
      ss += r * r;
    }
    d.sigma[i] = std::sqrt(ss);
  }
  return d;
}

}  // namespace detail

inline PlaneFit fit_plane(std::span<const Vec3> points) {
  const auto d = detail::decompose_centered(points);
  PlaneFit fit;
  fit.centroid = d.centroid;
  fit.normal = canonical_normal(d.eig.vectors[2]);
  fit.singular_values = d.sigma;
  // Jacobi ordering is by eigenvalue; the direct norms can disagree in the last ulp.
  std::sort(fit.singular_values.begin(), fit.singular_values.end(), std::greater<>());
  fit.sigma3 = fit.singular_values[2];
  return fit;
}
inline PlaneFit fit_plane(const PointCloud& cloud) { return fit_plane(cloud.points); }

struct Sigma3Options {
  double zero_threshold = 1e-12;   // below this sigma3 the gradient is the zero subgradient
  double degeneracy_gap = 1e-8;    // sigma2 - sigma3 below this flags an ill-conditioned normal
};

struct Sigma3Gradient {
  double sigma3 = 0.0;
  std::vector<Vec3> gradient;  // d sigma3 / d p_k
  bool ill_conditioned = false;
};

/// Smallest singular value of the centered point matrix together with its
/// gradient with respect to every input point.
///
/// With u3 = A v3 / sigma3, dsigma3/dA = u3 v3^T; pushing that through the
/// centering map gives dsigma3/dp_k = (u3)_k v3 - mean(u3) v3.
inline Sigma3Gradient sigma3_with_gradient(std::span<const Vec3> points, const Sigma3Options& opts = {}) {
  const auto d = detail::decompose_centered(points);
  const std::size_t n = points.size();
  Sigma3Gradient out;
  out.sigma3 = d.sigma[2];
  out.gradient.assign(n, Vec3{});
  out.ill_conditioned = (d.sigma[1] - d.sigma[2]) < opts.degeneracy_gap;
  if (out.sigma3 < opts.zero_threshold) return out;

  const Vec3 v3 = d.eig.vectors[2];
  std::vector<double> u(n);
  double u_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    u[k] = dot(points[k] - d.centroid, v3) / out.sigma3;
    u_sum += u[k];
  }
  const double u_mean = u_sum / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) out.gradient[k] = (u[k] - u_mean) * v3;
  return out;
}

inline RansacFit ransac_plane(std::span<const Vec3> points, const RansacParams& params = {}) {
  const std::size_t n = points.size();
  if (n < 3) throw InputError("underdetermined plane");
  if (params.iterations <= 0 || params.inlier_threshold <= 0.0 || params.min_inlier_fraction <= 0.0 ||
      params.min_inlier_fraction > 1.0)
    throw InputError("invalid RANSAC parameters");

  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);

  std::size_t best_count = 0;
  Vec3 best_point;
  Vec3 best_normal;
  for (int it = 0; it < params.iterations; ++it) {
    const std::size_t i0 = pick(rng);
    const std::size_t i1 = pick(rng);
    const std::size_t i2 = pick(rng);
    if (i0 == i1 || i1 == i2 || i0 == i2) continue;
    const Vec3 c = cross(points[i1] - points[i0], points[i2] - points[i0]);
    const double len = norm(c);
    if (len < 1e-12) continue;
    const Vec3 nrm = c / len;
    std::size_t count = 0;
    for (const auto& p : points)
      if (std::abs(dot(p - points[i0], nrm)) <= params.inlier_threshold) ++count;
    if (count > best_count) {
      best_count = count;
      best_point = points[i0];
      best_normal = nrm;
    }
  }

  const auto required = static_cast<double>(n) * params.min_inlier_fraction;
  if (best_count < 3 || static_cast<double>(best_count) < required) throw Error("no consensus plane");

  RansacFit out;
  out.inliers.assign(n, false);
  std::vector<Vec3> inlier_points;
  inlier_points.reserve(best_count);
  for (std::size_t k = 0; k < n; ++k) {
    if (std::abs(dot(points[k] - best_point, best_normal)) <= params.inlier_threshold) {
      out.inliers[k] = true;
      inlier_points.push_back(points[k]);
    }
  }
  out.n_inliers = inlier_points.size();
  out.plane = fit_plane(inlier_points);
  return out;
}
inline RansacFit ransac_plane(const PointCloud& cloud, const RansacParams& params = {}) {
  return ransac_plane(cloud.points, params);
}

}  // namespace planereg
