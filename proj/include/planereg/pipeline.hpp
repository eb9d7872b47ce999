// Dataset-level evaluation glue shared by the CLI and the acceptance suite.
#pragma once

#include <set>
#include <string>
#include <vector>

#include "planereg/dataset.hpp"
#include "planereg/metrics.hpp"
#include "planereg/renderer.hpp"
#include "planereg/scenefield.hpp"

namespace planereg {

/// Ground-truth range rays from the given frames, one per `stride`-th pixel in
/// each direction, skipping pixels with no surface.
inline std::vector<DepthRay> ground_truth_rays(const Dataset& data, const std::vector<std::size_t>& frames, int stride = 2) {
  if (stride <= 0) throw InputError("ray stride must be positive");
  std::vector<DepthRay> rays;
  for (std::size_t f : frames) {
    const auto& cam = data.frame(f).camera;
    const auto& depth = data.depth(f);
    const auto& sem = data.semantic(f);
    for (int y = stride / 2; y < cam.height; y += stride)
      for (int x = stride / 2; x < cam.width; x += stride) {
        if (!(depth.at(x, y) > 0.0)) continue;
        rays.push_back({pixel_ray(cam, {x, y}, data.manifest().ray_bounds), depth.at(x, y), sem.at(x, y)});
      }
  }
  return rays;
}

struct EvalOptions {
  std::string variant = "default";
  std::set<int> classes{1, 2, 3};
  int ray_stride = 2;
  int n_samples = 192;
  int ssim_window = 11;
  GeoEvalConfig geo;
  int workers = 1;
};

struct EvalOutcome {
  EvalRow row;
  PlaneSigmaResult plane;
  PointPair pair;
};

/// Image metrics over the validation split plus Chamfer and P_sigma over the
/// semantic-filtered validation rays.
inline EvalOutcome evaluate(const VoxelField& field, const Dataset& data, const EvalOptions& opt) {
  const auto val = data.manifest().frames_in(Split::kVal);
  if (val.empty()) throw InputError("dataset has no validation frames");
  EvalOutcome out;
  out.row.scene = data.manifest().scene;
  out.row.variant = opt.variant;
  for (std::size_t f : val) {
    const auto img = render_image(field, data.frame(f).camera, opt.n_samples, data.manifest().ray_bounds, false, 0, opt.workers);
    out.row.psnr += psnr(img.color, data.rgb(f));
    out.row.ssim += ssim_image(img.color, data.rgb(f), opt.ssim_window);
  }
  out.row.psnr /= static_cast<double>(val.size());
  out.row.ssim /= static_cast<double>(val.size());

  const auto rays = ground_truth_rays(data, val, opt.ray_stride);
  out.pair = filtered_point_pair(field, rays, opt.classes, opt.n_samples, opt.workers);
  out.row.cd = chamfer(out.pair.predicted, out.pair.ground_truth);
  GeoEvalConfig geo = opt.geo;
  geo.eval_classes = opt.classes;
  out.plane = plane_sigma_detailed(out.pair.predicted, out.pair.ground_truth, geo);
  out.row.p_sigma = out.plane.p_sigma;
  out.row.n_points = out.pair.predicted.size();
  out.row.n_cells = out.plane.n_cells;
  return out;
}

}  // namespace planereg
