// Patch losses: photometric MSE, single-window dSSIM, the plane SVD
// regularizer, the depth-smoothness baseline, semantic gating, and the
// scheduled per-patch total.
#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "planereg/error.hpp"
#include "planereg/geometry.hpp"
#include "planereg/renderer.hpp"
#include "planereg/vec3.hpp"

namespace planereg {

/// SSIM stabilizers for dynamic range 1: (0.01)^2 and (0.03)^2.
inline constexpr double kSsimC1 = 1e-4;
inline constexpr double kSsimC2 = 9e-4;

struct LossValue {
  double value = 0.0;
  std::vector<double> gradient;  // w.r.t. the primary input, flattened
};

namespace detail {

inline void require_same_size(std::size_t a, std::size_t b) {
  if (a != b) throw InputError("patch shape mismatch");
  if (a == 0) throw InputError("empty patch");
}

struct ChannelStats {
  double mu_x = 0, mu_y = 0, var_x = 0, var_y = 0, cov = 0;
};

inline ChannelStats channel_stats(std::span<const Vec3> x, std::span<const Vec3> y, int c) {
  ChannelStats s;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    s.mu_x += x[i][c];
    s.mu_y += y[i][c];
  }
  s.mu_x /= n;
  s.mu_y /= n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i][c] - s.mu_x;
    const double dy = y[i][c] - s.mu_y;
    s.var_x += dx * dx;
    s.var_y += dy * dy;
    s.cov += dx * dy;
  }
  s.var_x /= n;
  s.var_y /= n;
  s.cov /= n;
  return s;
}

inline double ssim_from_stats(const ChannelStats& s) {
  return ((2 * s.mu_x * s.mu_y + kSsimC1) * (2 * s.cov + kSsimC2)) /
         ((s.mu_x * s.mu_x + s.mu_y * s.mu_y + kSsimC1) * (s.var_x + s.var_y + kSsimC2));
}

}  // namespace detail

/// Mean squared error over pixels and channels; gradient w.r.t. `pred`
/// flattened as pixel * 3 + channel.
inline LossValue mse_loss(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  detail::require_same_size(pred.size(), gt.size());
  const double denom = 3.0 * static_cast<double>(pred.size());
  LossValue out;
  out.gradient.resize(pred.size() * 3);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double d = pred[i][c] - gt[i][c];
      out.value += d * d;
      out.gradient[i * 3 + static_cast<std::size_t>(c)] = 2.0 * d / denom;
    }
  }
  out.value /= denom;
  return out;
}

/// Single-window SSIM over the whole patch, averaged over RGB channels.
inline double ssim(std::span<const Vec3> x, std::span<const Vec3> y) {
  detail::require_same_size(x.size(), y.size());
  double total = 0.0;
  for (int c = 0; c < 3; ++c) total += detail::ssim_from_stats(detail::channel_stats(x, y, c));
  return total / 3.0;
}

/// (1 - SSIM) / 2 with its exact gradient w.r.t. `pred` (pixel * 3 + channel).
inline LossValue dssim_loss(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  detail::require_same_size(pred.size(), gt.size());
  const double n = static_cast<double>(pred.size());
  LossValue out;
  out.gradient.assign(pred.size() * 3, 0.0);
  double ssim_sum = 0.0;
  for (int c = 0; c < 3; ++c) {
    const auto s = detail::channel_stats(pred, gt, c);
    const double a1 = 2 * s.mu_x * s.mu_y + kSsimC1;
    const double a2 = 2 * s.cov + kSsimC2;
    const double b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + kSsimC1;
    const double b2 = s.var_x + s.var_y + kSsimC2;
    const double value = (a1 * a2) / (b1 * b2);
    ssim_sum += value;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double dx = pred[i][c] - s.mu_x;
      const double dy = gt[i][c] - s.mu_y;
      const double d_num = (2 * s.mu_y / n) * a2 + a1 * (2 * dy / n);
      const double d_ssim = d_num / (b1 * b2) - value * ((2 * s.mu_x / n) / b1 + (2 * dx / n) / b2);
      out.gradient[i * 3 + static_cast<std::size_t>(c)] = -d_ssim / 6.0;
    }
  }
  out.value = (1.0 - ssim_sum / 3.0) / 2.0;
  return out;
}

struct PlaneLossValue {
  double value = 0.0;
  std::vector<double> gradient;  // d loss / d depth_r
  bool ill_conditioned = false;
};

/// sigma3 of the patch point cloud p_r = o_r + d_r u_r, with d sigma3 / d d_r.
inline PlaneLossValue svd_plane_loss(std::span<const double> depths, std::span<const Ray> rays,
                                     const Sigma3Options& opts = {}) {
  if (depths.size() != rays.size()) throw InputError("patch shape mismatch");
  std::vector<Vec3> points(rays.size());
  for (std::size_t r = 0; r < rays.size(); ++r) points[r] = rays[r].origin + depths[r] * rays[r].dir;
  const auto s3 = sigma3_with_gradient(points, opts);
  PlaneLossValue out;
  out.value = s3.sigma3;
  out.ill_conditioned = s3.ill_conditioned;
  out.gradient.resize(rays.size());
  for (std::size_t r = 0; r < rays.size(); ++r) out.gradient[r] = dot(s3.gradient[r], rays[r].dir);
  return out;
}

inline int square_side(std::size_t n) {
  auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (static_cast<std::size_t>(side) * static_cast<std::size_t>(side) != n || n == 0)
    throw InputError("patch is not square");
  return side;
}

/// Squared differences to the lower and right neighbor for every pixel except
/// the last row and column, on a row-major square patch.
inline LossValue depth_smoothness_loss(std::span<const double> depths) {
  const int s = square_side(depths.size());
  LossValue out;
  out.gradient.assign(depths.size(), 0.0);
  auto at = [s](int r, int c) { return static_cast<std::size_t>(r * s + c); };
  for (int r = 0; r + 1 < s; ++r) {
    for (int c = 0; c + 1 < s; ++c) {
      const double down = depths[at(r, c)] - depths[at(r + 1, c)];
      const double right = depths[at(r, c)] - depths[at(r, c + 1)];
      out.value += down * down + right * right;
      out.gradient[at(r, c)] += 2 * down + 2 * right;
      out.gradient[at(r + 1, c)] -= 2 * down;
      out.gradient[at(r, c + 1)] -= 2 * right;
    }
  }
  return out;
}

struct SemanticGroup {
  std::string name;
  std::set<int> classes;
};

struct SemanticGroups {
  std::vector<SemanticGroup> groups;

  /// Index of the group containing `class_id`, if any.
  std::optional<std::size_t> group_of(int class_id) const {
    for (std::size_t g = 0; g < groups.size(); ++g)
      if (groups[g].classes.contains(class_id)) return g;
    return std::nullopt;
  }

  void validate() const {
    std::set<int> seen;
    for (const auto& g : groups)
      for (int c : g.classes)
        if (!seen.insert(c).second) throw InputError("class id " + std::to_string(c) + " appears in more than one semantic group");
  }
};

struct Eligibility {
  bool eligible = false;
  std::optional<std::size_t> group;
};

/// A patch is regularized only when all of its pixels fall in one semantic group.
inline Eligibility patch_eligible(std::span<const int> semantic, const SemanticGroups& groups) {
  if (semantic.empty()) return {};
  const auto first = groups.group_of(semantic.front());
  if (!first) return {};
  for (int c : semantic)
    if (groups.group_of(c) != first) return {};
  return {true, first};
}

struct LossWeights {
  double lambda0 = 0.1;   // dSSIM
  double lambda1 = 0.01;  // plane regularizer
  int svd_delay_epochs = 1;
};

enum class GeometryRegularizer { kPlaneSvd, kDepthSmoothness };

struct LossBreakdown {
  double mse = 0.0;
  double dssim = 0.0;
  double svd = 0.0;
  std::optional<double> ds_baseline;
  double total = 0.0;
  bool eligible = false;
  double lambda1_effective = 0.0;
};

struct PatchLoss {
  LossBreakdown breakdown;
  std::vector<Vec3> d_rgb;     // d total / d predicted color
  std::vector<double> d_depth; // d total / d predicted depth
};

/// Everything total_loss needs for one rendered patch.
struct PatchOutputs {
  std::span<const Vec3> pred_rgb;
  std::span<const double> pred_depth;
  std::span<const Ray> rays;
};

struct PatchTargets {
  std::span<const Vec3> gt_rgb;
  std::span<const int> semantic;
};

/// Effective regularizer weight: zero during the delay epochs or on ineligible patches.
inline double effective_lambda1(const LossWeights& w, int epoch, bool eligible) {
  return (eligible && epoch >= w.svd_delay_epochs) ? w.lambda1 : 0.0;
}

/// total = MSE + lambda0 dSSIM + lambda1_eff R, where R is the plane SVD term
/// (or the depth-smoothness baseline when selected). R is evaluated only on
/// eligible patches.
inline PatchLoss total_loss(const PatchOutputs& out, const PatchTargets& gt, const LossWeights& weights, int epoch,
                            const SemanticGroups& groups,
                            GeometryRegularizer regularizer = GeometryRegularizer::kPlaneSvd) {
  const std::size_t n = out.pred_rgb.size();
  if (out.pred_depth.size() != n || out.rays.size() != n || gt.gt_rgb.size() != n || gt.semantic.size() != n)
    throw InputError("patch shape mismatch");

  PatchLoss res;
  auto& b = res.breakdown;
  res.d_rgb.assign(n, Vec3{});
  res.d_depth.assign(n, 0.0);

  const auto mse = mse_loss(out.pred_rgb, gt.gt_rgb);
  b.mse = mse.value;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) res.d_rgb[i][c] += mse.gradient[i * 3 + static_cast<std::size_t>(c)];

  if (weights.lambda0 != 0.0) {
    const auto ds = dssim_loss(out.pred_rgb, gt.gt_rgb);
    b.dssim = ds.value;
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) res.d_rgb[i][c] += weights.lambda0 * ds.gradient[i * 3 + static_cast<std::size_t>(c)];
  } else {
    b.dssim = (1.0 - ssim(out.pred_rgb, gt.gt_rgb)) / 2.0;
  }

  b.eligible = patch_eligible(gt.semantic, groups).eligible;
  b.lambda1_effective = effective_lambda1(weights, epoch, b.eligible);
  double reg = 0.0;
  if (b.eligible) {
    std::vector<double> grad;
    if (regularizer == GeometryRegularizer::kPlaneSvd) {
      auto v = svd_plane_loss(out.pred_depth, out.rays);
      b.svd = reg = v.value;
      grad = std::move(v.gradient);
    } else {
      auto v = depth_smoothness_loss(out.pred_depth);
      b.ds_baseline = reg = v.value;
      grad = std::move(v.gradient);
    }
    if (b.lambda1_effective != 0.0)
      for (std::size_t i = 0; i < n; ++i) res.d_depth[i] += b.lambda1_effective * grad[i];
  }
  b.total = b.mse + weights.lambda0 * b.dssim + b.lambda1_effective * reg;
  return res;
}

}  // namespace planereg
