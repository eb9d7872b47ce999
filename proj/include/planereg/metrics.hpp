// Geometry and image-quality evaluation: semantic-filtered point pairs,
// squared-distance Chamfer, plane standard deviation over ground cells,
// PSNR and sliding-window SSIM.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "planereg/error.hpp"
#include "planereg/geometry.hpp"
#include "planereg/image.hpp"
#include "planereg/kdtree.hpp"
#include "planereg/losses.hpp"
#include "planereg/parallel.hpp"
#include "planereg/renderer.hpp"
#include "planereg/scenefield.hpp"

namespace planereg {

/// A ground-truth range measurement: ray, measured distance, and the class it ended on.
struct DepthRay {
  Ray ray;
  double depth = 0.0;
  int label = 0;
};

struct PointPair {
  PointCloud predicted;     // X
  PointCloud ground_truth;  // Y, same order as X
};

/// Keeps rays whose label is in `classes`, lifting the ground-truth depth to Y
/// and the rendered expected depth along the same ray to X.
inline PointPair filtered_point_pair(const VoxelField& field, std::span<const DepthRay> rays, const std::set<int>& classes,
                                     int n_samples = 192, int workers = 1) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < rays.size(); ++i)
    if (classes.contains(rays[i].label)) keep.push_back(i);
  if (keep.empty()) throw InputError("empty evaluation set");

  PointPair out;
  out.predicted.points.resize(keep.size());
  out.ground_truth.points.resize(keep.size());
  out.predicted.labels.resize(keep.size());
  out.ground_truth.labels.resize(keep.size());
  parallel_for(keep.size(), workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t k = begin; k < end; ++k) {
      const DepthRay& dr = rays[keep[k]];
      const auto t = sample_ray(dr.ray, n_samples, false);
      const double depth = render_ray(field, dr.ray, t).depth;
      out.predicted.points[k] = dr.ray.origin + depth * dr.ray.dir;
      out.ground_truth.points[k] = dr.ray.origin + dr.depth * dr.ray.dir;
      out.predicted.labels[k] = out.ground_truth.labels[k] = dr.label;
    }
  });
  return out;
}

/// (1/2N) sum_x min_y |x-y|^2 + (1/2M) sum_y min_x |x-y|^2.
inline double chamfer(std::span<const Vec3> x, std::span<const Vec3> y) {
  if (x.empty() || y.empty()) throw InputError("chamfer distance needs two nonempty point sets");
  auto directed = [](std::span<const Vec3> from, std::span<const Vec3> to) {
    const KdTree tree(to);
    double sum = 0.0;
    for (const auto& p : from) sum += tree.nearest_sq(p);
    return sum / (2.0 * static_cast<double>(from.size()));
  };
  return directed(x, y) + directed(y, x);
}
inline double chamfer(const PointCloud& x, const PointCloud& y) { return chamfer(x.points, y.points); }

struct GeoEvalConfig {
  std::set<int> eval_classes;
  double patch_extent = 3.0;  // meters
  RansacParams ransac;
  int min_points_per_patch = 20;
};

struct CellDiagnostics {
  long long ix = 0;
  long long iy = 0;
  std::size_t n_pred = 0;
  std::size_t n_gt = 0;
  bool evaluated = false;
  std::string skip_reason;
  Vec3 normal;
  double std_along_normal = 0.0;  // meters
};

struct PlaneSigmaResult {
  double p_sigma = 0.0;  // meters
  std::vector<CellDiagnostics> cells;
  std::size_t n_cells = 0;  // evaluated cells
};

/// Splits both clouds into patch_extent x patch_extent cells on the (x, y)
/// ground plane. For each cell populated in both clouds, a RANSAC normal is
/// estimated from the ground-truth points and the population standard
/// deviation of the predicted points along it is taken. Returns the mean over
/// evaluated cells.
inline PlaneSigmaResult plane_sigma_detailed(const PointCloud& x_pred, const PointCloud& y_gt, const GeoEvalConfig& cfg) {
  if (!(cfg.patch_extent > 0.0)) throw InputError("patch_extent must be positive");
  using Key = std::pair<long long, long long>;
  auto key_of = [&](const Vec3& p) {
    return Key{static_cast<long long>(std::floor(p.x / cfg.patch_extent)),
               static_cast<long long>(std::floor(p.y / cfg.patch_extent))};
  };
  std::map<Key, std::vector<Vec3>> pred_cells, gt_cells;
  for (const auto& p : x_pred.points) pred_cells[key_of(p)].push_back(p);
  for (const auto& p : y_gt.points) gt_cells[key_of(p)].push_back(p);

  PlaneSigmaResult res;
  double sum = 0.0;
  const auto min_pts = static_cast<std::size_t>(std::max(3, cfg.min_points_per_patch));
  for (const auto& [key, gt_pts] : gt_cells) {
    CellDiagnostics d;
    d.ix = key.first;
    d.iy = key.second;
    d.n_gt = gt_pts.size();
    const auto it = pred_cells.find(key);
    d.n_pred = it == pred_cells.end() ? 0 : it->second.size();
    if (d.n_gt < min_pts || d.n_pred < min_pts) {
      d.skip_reason = "too few points";
      res.cells.push_back(d);
      continue;
    }
    try {
      d.normal = ransac_plane(gt_pts, cfg.ransac).plane.normal;
    } catch (const Error& e) {
      d.skip_reason = e.what();
      res.cells.push_back(d);
      continue;
    }
    const auto& pred = it->second;
    double mean = 0.0;
    for (const auto& p : pred) mean += dot(p, d.normal);
    mean /= static_cast<double>(pred.size());
    double var = 0.0;
    for (const auto& p : pred) {
      const double r = dot(p, d.normal) - mean;
      var += r * r;
    }
    d.std_along_normal = std::sqrt(var / static_cast<double>(pred.size()));
    d.evaluated = true;
    sum += d.std_along_normal;
    ++res.n_cells;
    res.cells.push_back(d);
  }
  if (res.n_cells == 0) throw InputError("no evaluable patches");
  res.p_sigma = sum / static_cast<double>(res.n_cells);
  return res;
}

inline double plane_sigma(const PointCloud& x_pred, const PointCloud& y_gt, const GeoEvalConfig& cfg) {
  return plane_sigma_detailed(x_pred, y_gt, cfg).p_sigma;
}

inline constexpr double kPsnrCap = 99.0;

inline double image_mse(const ColorImage& a, const ColorImage& b) {
  if (a.width != b.width || a.height != b.height) throw InputError("image shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec3 d = a.data[i] - b.data[i];
    s += dot(d, d);
  }
  return s / (3.0 * static_cast<double>(a.size()));
}

/// 10 log10(1 / MSE) for unit dynamic range, capped at 99 dB.
inline double psnr(const ColorImage& pred, const ColorImage& gt) {
  const double mse = image_mse(pred, gt);
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Mean SSIM over all fully contained window x window positions (stride 1),
/// uniform weights and population statistics, averaged over channels.
inline double ssim_image(const ColorImage& pred, const ColorImage& gt, int window = 11) {
  if (pred.width != gt.width || pred.height != gt.height) throw InputError("image shape mismatch");
  if (window <= 0 || pred.width < window || pred.height < window) throw InputError("image smaller than SSIM window");
  const int w = pred.width, h = pred.height;
  const int stride = w + 1;
  const double area = static_cast<double>(window) * window;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    // Summed-area tables of x, y, x^2, y^2, xy, taken about each image's mean
    // so the variance differences below don't cancel catastrophically.
    double off_x = 0.0, off_y = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      off_x += pred.data[i][c];
      off_y += gt.data[i][c];
    }
    off_x /= static_cast<double>(pred.data.size());
    off_y /= static_cast<double>(gt.data.size());
    std::array<std::vector<double>, 5> sat;
    for (auto& t : sat) t.assign(static_cast<std::size_t>((w + 1) * (h + 1)), 0.0);
    for (int yy = 0; yy < h; ++yy) {
      for (int xx = 0; xx < w; ++xx) {
        const double a = pred.at(xx, yy)[c] - off_x;
        const double b = gt.at(xx, yy)[c] - off_y;
        const std::array<double, 5> v{a, b, a * a, b * b, a * b};
        const auto idx = static_cast<std::size_t>((yy + 1) * stride + xx + 1);
        for (std::size_t k = 0; k < 5; ++k)
          sat[k][idx] = v[k] + sat[k][idx - 1] + sat[k][idx - static_cast<std::size_t>(stride)] -
                        sat[k][idx - static_cast<std::size_t>(stride) - 1];
      }
    }
    auto box = [&](std::size_t k, int x0, int y0) {
      const auto at = [&](int xx, int yy) { return sat[k][static_cast<std::size_t>(yy * stride + xx)]; };
      return at(x0 + window, y0 + window) - at(x0, y0 + window) - at(x0 + window, y0) + at(x0, y0);
    };
    double sum = 0.0;
    for (int y0 = 0; y0 + window <= h; ++y0) {
      for (int x0 = 0; x0 + window <= w; ++x0) {
        detail::ChannelStats s;
        const double mx = box(0, x0, y0) / area;
        const double my = box(1, x0, y0) / area;
        s.var_x = std::max(0.0, box(2, x0, y0) / area - mx * mx);
        s.var_y = std::max(0.0, box(3, x0, y0) / area - my * my);
        s.cov = box(4, x0, y0) / area - mx * my;
        s.mu_x = mx + off_x;
        s.mu_y = my + off_y;
        sum += detail::ssim_from_stats(s);
      }
    }
    total += sum / static_cast<double>((w - window + 1) * (h - window + 1));
  }
  return total / 3.0;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
  std::string scene;
  std::string variant;
  double cd = 0.0;       // m^2
  double p_sigma = 0.0;  // meters
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t n_points = 0;
  std::size_t n_cells = 0;
};

inline const char* kEvalCsvHeader = "scene,variant,CD,P_sigma,PSNR,SSIM,LPIPS,n_points,n_cells";

/// Appends one row (writing the header first for a new file). CD is in m^2,
/// P_sigma in centimeters, LPIPS is always "n/a".
inline void append_eval_csv(const std::filesystem::path& path, const EvalRow& row) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw Error("cannot open report for writing: " + path.string());
  if (fresh) os << kEvalCsvHeader << '\n';
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.6f,%.6f,n/a,%zu,%zu", row.cd, row.p_sigma * 100.0, row.psnr, row.ssim,
                row.n_points, row.n_cells);
  os << row.scene << ',' << row.variant << ',' << buf << '\n';
  if (!os) throw Error("failed writing " + path.string());
}

inline nlohmann::json eval_report_json(const EvalRow& row, const PlaneSigmaResult& ps) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : ps.cells) {
    nlohmann::json j{{"ix", c.ix}, {"iy", c.iy}, {"n_pred", c.n_pred}, {"n_gt", c.n_gt}, {"evaluated", c.evaluated}};
    if (c.evaluated) {
      j["normal"] = {c.normal.x, c.normal.y, c.normal.z};
      j["std_m"] = c.std_along_normal;
    } else {
      j["skip_reason"] = c.skip_reason;
    }
    cells.push_back(std::move(j));
  }
  return {{"scene", row.scene},
          {"variant", row.variant},
          {"CD", row.cd},
          {"CD_units", "m^2"},
          {"P_sigma", row.p_sigma * 100.0},
          {"P_sigma_units", "cm"},
          {"PSNR", row.psnr},
          {"SSIM", row.ssim},
          {"LPIPS", "n/a"},
          {"n_points", row.n_points},
          {"n_cells", row.n_cells},
          {"cells", std::move(cells)}};
}

}  // namespace planereg
