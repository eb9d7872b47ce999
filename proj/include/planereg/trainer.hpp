// Patch-batch optimization of a voxel field: batch sampling, forward and
// reverse rendering, scheduled losses, Adam with cosine decay, validation
// with early stopping.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "planereg/dataset.hpp"
#include "planereg/error.hpp"
#include "planereg/losses.hpp"
#include "planereg/metrics.hpp"
#include "planereg/parallel.hpp"
#include "planereg/renderer.hpp"
#include "planereg/scenefield.hpp"

namespace planereg {

struct PatchBatch {
  std::vector<Ray> rays;  // row-major
  std::vector<Vec3> gt_rgb;
  std::vector<int> semantic;
  std::size_t camera_id = 0;  // frame index in the manifest
  Pixel top_left;
};

struct TrainConfig {
  int epochs = 100;
  int batch_patches = 128;
  int patch_size = 20;
  double lr_start = 1e-2;
  double lr_end = 1e-4;
  // Per-parameter-group multipliers on the scheduled learning rate.
  double density_lr_scale = 30.0;
  double color_lr_scale = 10.0;
  LossWeights weights;
  GeometryRegularizer regularizer = GeometryRegularizer::kPlaneSvd;
  int n_samples_train = 64;
  int n_samples_eval = 192;
  int early_stop_patience = 10;
  double min_psnr_improvement = 0.01;  // dB
  GridResolution resolution{64, 64, 64};
  double init_density_raw = -2.0;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const {
    if (epochs <= 0 || batch_patches <= 0 || patch_size <= 0 || n_samples_train < 2 || n_samples_eval < 2 ||
        early_stop_patience <= 0 || workers <= 0)
      throw InputError("training counts must be positive");
    if (lr_start < 0.0 || lr_end < 0.0 || lr_end > lr_start) throw InputError("learning rates must satisfy 0 <= lr_end <= lr_start");
    if (density_lr_scale < 0.0 || color_lr_scale < 0.0) throw InputError("learning rate scales must be nonnegative");
    if (weights.lambda0 < 0.0 || weights.lambda1 < 0.0 || weights.svd_delay_epochs < 0)
      throw InputError("loss weights must be nonnegative");
  }
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(const VoxelField& field) : m(field.params().size(), 0.0), v(field.params().size(), 0.0) {}
};

/// One Adam update with bias correction. Entries whose gradient is exactly
/// zero are left untouched, moments included.
inline void adam_update(VoxelField& field, const ParamGrad& grad, AdamState& opt, double lr, double density_scale = 1.0,
                        double color_scale = 1.0) {
  auto& p = field.params();
  if (grad.values.size() != p.size() || opt.m.size() != p.size()) throw InputError("optimizer state does not match field");
  ++opt.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g = grad.values[i];
    if (g == 0.0) continue;
    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
    opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
    const double scale = (i % VoxelField::kChannels == 0) ? density_scale : color_scale;
    p[i] -= lr * scale * (opt.m[i] / bc1) / (std::sqrt(opt.v[i] / bc2) + opt.eps);
  }
}

/// lr_end + (lr_start - lr_end)(1 + cos(pi step / total)) / 2.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_end) {
  if (total_steps <= 0) return lr_start;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Steps per epoch: ceil(training pixels / rays per batch).
inline std::int64_t steps_per_epoch(const Dataset& data, const TrainConfig& cfg) {
  std::int64_t pixels = 0;
  for (std::size_t i : data.manifest().frames_in(Split::kTrain))
    pixels += static_cast<std::int64_t>(data.frame(i).camera.width) * data.frame(i).camera.height;
  const std::int64_t per_step = static_cast<std::int64_t>(cfg.batch_patches) * cfg.patch_size * cfg.patch_size;
  return std::max<std::int64_t>(1, (pixels + per_step - 1) / per_step);
}

inline std::vector<PatchBatch> sample_patch_batch(const Dataset& data, std::mt19937_64& rng, int batch_patches,
                                                  int patch_size) {
  const auto train = data.manifest().frames_in(Split::kTrain);
  if (train.empty()) throw InputError("dataset has no training frames");
  for (std::size_t i : train)
    if (data.frame(i).camera.width < patch_size || data.frame(i).camera.height < patch_size)
      throw InputError("training image smaller than patch size");
  std::uniform_int_distribution<std::size_t> pick_frame(0, train.size() - 1);
  std::vector<PatchBatch> out(static_cast<std::size_t>(batch_patches));
  for (auto& b : out) {
    b.camera_id = train[pick_frame(rng)];
    const auto& cam = data.frame(b.camera_id).camera;
    std::uniform_int_distribution<int> px(0, cam.width - patch_size);
    std::uniform_int_distribution<int> py(0, cam.height - patch_size);
    b.top_left.x = px(rng);
    b.top_left.y = py(rng);
    b.rays = rays_for_patch(cam, b.top_left, patch_size, data.manifest().ray_bounds);
    const auto& rgb = data.rgb(b.camera_id);
    const auto& sem = data.semantic(b.camera_id);
    b.gt_rgb.reserve(b.rays.size());
    b.semantic.reserve(b.rays.size());
    for (int r = 0; r < patch_size; ++r)
      for (int c = 0; c < patch_size; ++c) {
        b.gt_rgb.push_back(rgb.at(b.top_left.x + c, b.top_left.y + r));
        b.semantic.push_back(sem.at(b.top_left.x + c, b.top_left.y + r));
      }
  }
  return out;
}

struct StepReport {
  LossBreakdown loss;  // batch averages
  double eligible_fraction = 0.0;
  std::size_t n_eligible = 0;
  double lr = 0.0;
};

/// splitmix64 finalizer, used to derive independent per-patch seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct StepContext {
  const LossWeights& weights;
  const SemanticGroups& groups;
  GeometryRegularizer regularizer = GeometryRegularizer::kPlaneSvd;
  int n_samples = 64;
  bool stratified = true;
  std::uint64_t sample_seed = 0;
  int workers = 1;
};

/// Renders every patch, evaluates the scheduled losses, and accumulates the
/// exact gradient of the batch objective
///   mean_p MSE_p + lambda0 mean_p dSSIM_p + lambda1_eff mean_{eligible p} R_p
/// into `grad` (which is zeroed first).
inline StepReport batch_loss_and_gradient(const VoxelField& field, std::span<const PatchBatch> batch, const StepContext& ctx,
                                          int epoch, ParamGrad& grad, std::int64_t step_for_diagnostics = 0) {
  const std::size_t n_patches = batch.size();
  if (n_patches == 0) throw InputError("empty batch");
  std::vector<bool> eligible(n_patches);
  std::size_t n_eligible = 0;
  for (std::size_t p = 0; p < n_patches; ++p) {
    eligible[p] = patch_eligible(batch[p].semantic, ctx.groups).eligible;
    n_eligible += eligible[p] ? 1 : 0;
  }

  const int workers = std::max(1, ctx.workers);
  std::vector<ParamGrad> worker_grads;
  worker_grads.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) worker_grads.emplace_back(w == 0 ? ParamGrad() : ParamGrad(field));
  grad.values.assign(field.params().size(), 0.0);
  std::vector<LossBreakdown> per_patch(n_patches);

  parallel_for(n_patches, workers, [&](std::size_t begin, std::size_t end, int w) {
    ParamGrad& acc = w == 0 ? grad : worker_grads[static_cast<std::size_t>(w)];
    std::vector<RayTrace> traces;
    std::vector<Vec3> pred_rgb;
    std::vector<double> pred_depth;
    for (std::size_t p = begin; p < end; ++p) {
      const PatchBatch& pb = batch[p];
      const std::size_t n = pb.rays.size();
      std::mt19937_64 rng(mix_seed(ctx.sample_seed, p));
      traces.clear();
      pred_rgb.resize(n);
      pred_depth.resize(n);
      for (std::size_t r = 0; r < n; ++r) {
        const auto t = sample_ray(pb.rays[r], ctx.n_samples, ctx.stratified, rng);
        traces.push_back(trace_ray(field, pb.rays[r], t));
        pred_rgb[r] = traces.back().result.color;
        pred_depth[r] = traces.back().result.depth;
      }
      PatchLoss pl = total_loss({pred_rgb, pred_depth, pb.rays}, {pb.gt_rgb, pb.semantic}, ctx.weights, epoch, ctx.groups,
                                ctx.regularizer);
      const auto& b = pl.breakdown;
      if (!std::isfinite(b.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step_for_diagnostics << " (frame " << pb.camera_id << ", patch at "
            << pb.top_left.x << "," << pb.top_left.y << "): mse=" << b.mse << " dssim=" << b.dssim << " svd=" << b.svd;
        throw Error(msg.str());
      }
      per_patch[p] = b;
      const double rgb_scale = 1.0 / static_cast<double>(n_patches);
      const double depth_scale = n_eligible > 0 ? 1.0 / static_cast<double>(n_eligible) : 0.0;
      for (std::size_t r = 0; r < n; ++r)
        backward_trace(traces[r], pl.d_rgb[r] * rgb_scale, pl.d_depth[r] * depth_scale, acc);
    }
  });
  for (int w = 1; w < workers; ++w) grad += worker_grads[static_cast<std::size_t>(w)];

  StepReport rep;
  rep.n_eligible = n_eligible;
  rep.eligible_fraction = static_cast<double>(n_eligible) / static_cast<double>(n_patches);
  auto& L = rep.loss;
  double reg_sum = 0.0;
  bool ds = ctx.regularizer == GeometryRegularizer::kDepthSmoothness;
  for (std::size_t p = 0; p < n_patches; ++p) {
    L.mse += per_patch[p].mse;
    L.dssim += per_patch[p].dssim;
    if (eligible[p]) reg_sum += ds ? per_patch[p].ds_baseline.value_or(0.0) : per_patch[p].svd;
  }
  L.mse /= static_cast<double>(n_patches);
  L.dssim /= static_cast<double>(n_patches);
  const double reg = n_eligible > 0 ? reg_sum / static_cast<double>(n_eligible) : 0.0;
  if (ds)
    L.ds_baseline = reg;
  else
    L.svd = reg;
  L.eligible = n_eligible > 0;
  L.lambda1_effective = effective_lambda1(ctx.weights, epoch, L.eligible);
  L.total = L.mse + ctx.weights.lambda0 * L.dssim + L.lambda1_effective * reg;
  return rep;
}

/// One optimization step on `batch` at learning rate `lr`.
inline StepReport train_step(VoxelField& field, std::span<const PatchBatch> batch, AdamState& opt, const TrainConfig& cfg,
                             const SemanticGroups& groups, int epoch, double lr, std::uint64_t step_seed) {
  ParamGrad grad;
  const StepContext ctx{cfg.weights, groups, cfg.regularizer, cfg.n_samples_train, true, step_seed, cfg.workers};
  StepReport rep = batch_loss_and_gradient(field, batch, ctx, epoch, grad, opt.step);
  adam_update(field, grad, opt, lr, cfg.density_lr_scale, cfg.color_lr_scale);
  rep.lr = lr;
  return rep;
}

inline nlohmann::json step_log_json(std::int64_t step, int epoch, const StepReport& r) {
  nlohmann::json j{{"step", step},
                   {"epoch", epoch},
                   {"mse", r.loss.mse},
                   {"dssim", r.loss.dssim},
                   {"svd", r.loss.svd},
                   {"total", r.loss.total},
                   {"eligible_fraction", r.eligible_fraction},
                   {"lambda1_eff", r.loss.lambda1_effective},
                   {"lr", r.lr}};
  if (r.loss.ds_baseline) j["ds_baseline"] = *r.loss.ds_baseline;
  return j;
}

/// Mean PSNR over the validation frames, rendered with midpoint sampling.
inline double validation_psnr(const VoxelField& field, const Dataset& data, int n_samples, int workers = 1) {
  const auto val = data.manifest().frames_in(Split::kVal);
  if (val.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i : val) {
    const auto img = render_image(field, data.frame(i).camera, n_samples, data.manifest().ray_bounds, false, 0, workers);
    sum += psnr(img.color, data.rgb(i));
  }
  return sum / static_cast<double>(val.size());
}

struct EpochRecord {
  int epoch = 0;
  double val_psnr = 0.0;
  double lr = 0.0;
};

struct FitResult {
  VoxelField best_field;
  int best_epoch = 0;
  double best_psnr = 0.0;
  int epochs_run = 0;
  std::vector<nlohmann::json> step_log;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
};

struct FitOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool write_epoch_checkpoints = true;
  /// Called after each step with the batch that was used.
  std::function<void(std::int64_t step, int epoch, std::span<const PatchBatch>, const StepReport&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains from a fresh field. After every epoch the validation split is
/// rendered; training stops once PSNR has not improved by more than
/// min_psnr_improvement for early_stop_patience epochs. The best-PSNR field is
/// returned (and written as best.plnf when out_dir is set).
inline FitResult fit(const Dataset& data, const TrainConfig& cfg, const FitOptions& opts = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto& man = data.manifest();

  VoxelField field = init_field(cfg.resolution, man.bbox, cfg.init_density_raw, cfg.seed);
  AdamState opt(field);
  std::mt19937_64 batch_rng(mix_seed(cfg.seed, 0xba7c4));
  const std::int64_t per_epoch = steps_per_epoch(data, cfg);
  const std::int64_t total_steps = per_epoch * cfg.epochs;

  std::ofstream step_log_file, val_log_file;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    step_log_file.open(opts.out_dir / "train_log.jsonl");
    val_log_file.open(opts.out_dir / "val_log.jsonl");
    if (!step_log_file || !val_log_file) throw Error("cannot write logs under " + opts.out_dir.string());
  }

  FitResult res;
  res.best_psnr = -std::numeric_limits<double>::infinity();
  int stale = 0;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr_start;
    for (std::int64_t s = 0; s < per_epoch; ++s, ++step) {
      lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end);
      const auto batch = sample_patch_batch(data, batch_rng, cfg.batch_patches, cfg.patch_size);
      const StepReport rep = train_step(field, batch, opt, cfg, man.semantic_groups, epoch, lr, mix_seed(cfg.seed, static_cast<std::uint64_t>(step) + 1));
      auto entry = step_log_json(step, epoch, rep);
      if (step_log_file.is_open()) step_log_file << entry.dump() << '\n';
      res.step_log.push_back(std::move(entry));
      if (opts.on_step) opts.on_step(step, epoch, batch, rep);
    }

    EpochRecord rec{epoch, validation_psnr(field, data, cfg.n_samples_eval, cfg.workers), lr};
    res.epochs.push_back(rec);
    res.epochs_run = epoch + 1;
    if (val_log_file.is_open()) {
      val_log_file << nlohmann::json{{"epoch", rec.epoch}, {"val_psnr", rec.val_psnr}, {"lr", rec.lr}}.dump() << '\n';
      val_log_file.flush();
    }
    if (opts.on_epoch) opts.on_epoch(rec);
    if (!opts.out_dir.empty() && opts.write_epoch_checkpoints) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_epoch%03d.plnf", epoch);
      save_checkpoint(field, opts.out_dir / name);
    }

    if (rec.val_psnr > res.best_psnr + cfg.min_psnr_improvement || res.epochs_run == 1) {
      res.best_psnr = rec.val_psnr;
      res.best_epoch = epoch;
      res.best_field = field;
      stale = 0;
      if (!opts.out_dir.empty()) save_checkpoint(field, opts.out_dir / "best.plnf");
    } else if (++stale >= cfg.early_stop_patience) {
      break;
    }
  }

  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!opts.out_dir.empty()) {
    std::ofstream summary(opts.out_dir / "summary.json");
    summary << nlohmann::json{{"best_epoch", res.best_epoch}, {"best_psnr", res.best_psnr}, {"wall_seconds", res.wall_seconds},
                              {"epochs_run", res.epochs_run}}
                   .dump(2)
            << '\n';
  }
  return res;
}

}  // namespace planereg
