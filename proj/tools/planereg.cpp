// planereg command line: gen-data, train, eval, render, export-ply.
//
// Exit codes: 0 success, 2 usage or input error, 1 internal error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "planereg/planereg.hpp"

namespace fs = std::filesystem;
using namespace planereg;

namespace {

struct GlobalOptions {
  int threads = 0;
  bool json_errors = false;
  std::string config;
};

/// Fills options of `cmd` that were not given on the command line from a flat
/// JSON object keyed by long option names.
void apply_config_file(const std::string& path, CLI::App& app, CLI::App& cmd) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("config file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw InputError("config file must be a flat JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "config") throw InputError("config files cannot reference other config files");
    CLI::Option* opt = nullptr;
    for (CLI::App* owner : {&cmd, &app}) {
      try {
        opt = owner->get_option("--" + key);
        break;
      } catch (const CLI::OptionNotFound&) {
      }
    }
    if (opt == nullptr) throw InputError("unknown config key '" + key + "' for command " + cmd.get_name());
    if (opt->count() > 0) continue;  // flags win
    if (value.is_object() || value.is_array() || value.is_null()) throw InputError("config key '" + key + "' must be a scalar");
    std::string text = value.is_string() ? value.get<std::string>() : value.dump();
    opt->add_result(text);
    opt->run_callback();
  }
}

std::set<int> parse_classes(const std::string& spec, const std::map<int, std::string>& table) {
  std::set<int> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    bool found = false;
    for (const auto& [id, name] : table)
      if (name == item || std::to_string(id) == item) {
        out.insert(id);
        found = true;
      }
    if (!found) throw InputError("unknown class '" + item + "'");
  }
  if (out.empty()) throw InputError("empty class selection");
  return out;
}

int threads_or_default(int requested) { return requested > 0 ? requested : default_threads(); }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string preset = "flat-road";
  std::string out;
  int frames = 15;
  std::uint64_t seed = 0;
  double dropout = 0.5;
  double label_noise = 0.0;
  std::string style = "line-with-jitter";
  int width = 160;
  int height = 120;
};

int cmd_gen_data(const GenDataArgs& a) {
  TrajectoryStyle style;
  if (a.style == "line-with-jitter")
    style = TrajectoryStyle::kLineWithJitter;
  else if (a.style == "arc")
    style = TrajectoryStyle::kArc;
  else
    throw InputError("unknown trajectory style '" + a.style + "' (line-with-jitter, arc)");
  const SceneSpec spec = generate_scene(a.preset, a.seed);
  TrajectoryOptions topt;
  topt.width = a.width;
  topt.height = a.height;
  topt.focal = 0.75 * a.width;
  const auto cams = generate_trajectory(a.frames, style, a.seed, topt);
  WriteOptions wopt;
  wopt.dropout = a.dropout;
  wopt.label_noise = a.label_noise;
  wopt.seed = a.seed;
  const auto m = write_dataset(spec, cams, a.out, wopt);
  std::cout << "scene " << m.scene << ": " << m.frames.size() << " frames (" << m.frames_in(Split::kTrain).size()
            << " train, " << m.frames_in(Split::kVal).size() << " val, " << m.frames_in(Split::kDropped).size()
            << " dropped) -> " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out;
  TrainConfig cfg;
  bool no_svd = false;
  bool no_dssim = false;
  bool ds_baseline = false;
  int grid = 64;
};

int cmd_train(TrainArgs a, int threads) {
  const Dataset data = load_dataset(a.data);
  data.preload();
  TrainConfig cfg = a.cfg;
  cfg.resolution = {a.grid, a.grid, a.grid};
  if (a.no_svd) cfg.weights.lambda1 = 0.0;
  if (a.no_dssim) cfg.weights.lambda0 = 0.0;
  if (a.ds_baseline) cfg.regularizer = GeometryRegularizer::kDepthSmoothness;
  cfg.workers = threads;
  FitOptions opts;
  opts.out_dir = a.out;
  opts.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %3d  val PSNR %.3f dB  lr %.3g\n", r.epoch, r.val_psnr, r.lr);
    std::fflush(stdout);
  };
  const FitResult res = fit(data, cfg, opts);
  std::printf("best epoch %d, val PSNR %.3f dB, %.1f s -> %s\n", res.best_epoch, res.best_psnr, res.wall_seconds,
              (fs::path(a.out) / "best.plnf").c_str());
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string out = "eval.csv";
  std::string variant = "default";
  std::string classes = "road,lane,sidewalk";
  int stride = 2;
  int samples = 192;
};

int cmd_eval(const EvalArgs& a, int threads) {
  const Dataset data = load_dataset(a.data);
  const VoxelField field = load_checkpoint(a.checkpoint);
  EvalOptions opt;
  opt.variant = a.variant;
  opt.classes = parse_classes(a.classes, data.manifest().class_table);
  opt.ray_stride = a.stride;
  opt.n_samples = a.samples;
  opt.workers = threads;
  const EvalOutcome res = evaluate(field, data, opt);
  append_eval_csv(a.out, res.row);
  fs::path json_path = fs::path(a.out);
  json_path.replace_extension("." + a.variant + ".json");
  std::ofstream js(json_path);
  js << eval_report_json(res.row, res.plane).dump(2) << '\n';
  std::printf("%s\n%s,%s,%.9g,%.6f,%.4f,%.4f,n/a,%zu,%zu\n", kEvalCsvHeader, res.row.scene.c_str(), res.row.variant.c_str(),
              res.row.cd, res.row.p_sigma * 100.0, res.row.psnr, res.row.ssim, res.row.n_points, res.row.n_cells);
  return 0;
}

/// Line number (1-based) of byte offset `pos` in `text`.
std::size_t line_of(const std::string& text, std::size_t pos) {
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(pos, text.size())), '\n'));
}

/// Start line of each element of the top-level "poses" array.
std::vector<std::size_t> pose_lines(const std::string& text) {
  std::vector<std::size_t> lines;
  const auto key = text.find("\"poses\"");
  if (key == std::string::npos) return lines;
  auto open = text.find('[', key);
  if (open == std::string::npos) return lines;
  int depth = 0;
  bool in_string = false;
  bool expect_element = true;
  for (std::size_t i = open + 1; i < text.size(); ++i) {
    const char ch = text[i];
    if (in_string) {
      if (ch == '\\') ++i;
      else if (ch == '"') in_string = false;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) continue;
    if (depth == 0 && expect_element && ch != ']') {
      lines.push_back(line_of(text, i));
      expect_element = false;
    }
    if (ch == '"') in_string = true;
    else if (ch == '[' || ch == '{') ++depth;
    else if (ch == ']' || ch == '}') {
      if (depth == 0) break;
      --depth;
    } else if (ch == ',' && depth == 0) expect_element = true;
  }
  return lines;
}

/// Pose file: {"intrinsics": {fx, fy, cx, cy, width, height}, "poses": [4x4 camera-to-world, ...]}
/// where each pose is 16 row-major numbers or 4 rows of 4.
std::vector<Camera> load_pose_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open pose file: " + path);
  const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path + ":" + std::to_string(line_of(text, e.byte == 0 ? 0 : e.byte - 1)) + ": malformed pose file: " + e.what());
  }
  const auto lines = pose_lines(text);
  auto fail = [&](std::size_t line, const std::string& what) {
    throw InputError(path + ":" + std::to_string(line) + ": malformed pose file: " + what);
  };
  if (!j.is_object() || !j.contains("intrinsics") || !j.contains("poses") || !j["poses"].is_array())
    fail(1, "expected an object with 'intrinsics' and 'poses'");
  Camera base;
  try {
    const auto& k = j["intrinsics"];
    base.fx = k.at("fx").get<double>();
    base.fy = k.at("fy").get<double>();
    base.cx = k.at("cx").get<double>();
    base.cy = k.at("cy").get<double>();
    base.width = k.at("width").get<int>();
    base.height = k.at("height").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(line_of(text, text.find("\"intrinsics\"")), e.what());
  }
  std::vector<Camera> cams;
  for (std::size_t p = 0; p < j["poses"].size(); ++p) {
    const std::size_t line = p < lines.size() ? lines[p] : 1;
    std::vector<double> m;
    try {
      const auto& pose = j["poses"][p];
      if (pose.is_array() && pose.size() == 4 && pose[0].is_array()) {
        for (const auto& row : pose) {
          const auto r = row.get<std::vector<double>>();
          m.insert(m.end(), r.begin(), r.end());
        }
      } else {
        m = pose.get<std::vector<double>>();
      }
    } catch (const nlohmann::json::exception& e) {
      fail(line, e.what());
    }
    if (m.size() != 16) fail(line, "pose " + std::to_string(p) + " must have 16 entries");
    Camera cam = base;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) cam.rotation(r, c) = m[static_cast<std::size_t>(r * 4 + c)];
      cam.translation[r] = m[static_cast<std::size_t>(r * 4 + 3)];
    }
    try {
      cam.validate();
    } catch (const InputError& e) {
      fail(line, "pose " + std::to_string(p) + ": " + e.what());
    }
    cams.push_back(cam);
  }
  return cams;
}

struct RenderArgs {
  std::string checkpoint;
  std::string poses = "val";
  std::string data;
  std::string out;
  int samples = 192;
};

int cmd_render(const RenderArgs& a, int threads) {
  const VoxelField field = load_checkpoint(a.checkpoint);
  std::vector<Camera> cams;
  RayBounds bounds{0.05, field.bbox().diameter()};
  if (a.poses == "val") {
    if (a.data.empty()) throw InputError("--poses val requires --data");
    const Dataset data = load_dataset(a.data);
    for (std::size_t f : data.manifest().frames_in(Split::kVal)) cams.push_back(data.frame(f).camera);
    bounds = data.manifest().ray_bounds;
  } else {
    cams = load_pose_file(a.poses);
  }
  fs::create_directories(fs::path(a.out) / "rgb");
  fs::create_directories(fs::path(a.out) / "depth");
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const auto img = render_image(field, cams[i], a.samples, bounds, false, 0, threads);
    char name[32];
    std::snprintf(name, sizeof name, "%04zu", i);
    io::write_rgb_png(fs::path(a.out) / "rgb" / (std::string(name) + ".png"), img.color);
    io::write_depth_png(fs::path(a.out) / "depth" / (std::string(name) + ".png"), img.depth);
    io::write_depth_bin(fs::path(a.out) / "depth" / (std::string(name) + ".bin"), img.depth);
  }
  std::printf("rendered %zu views -> %s (depth PNG: meters = value / 1000)\n", cams.size(), a.out.c_str());
  return 0;
}

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::string classes = "road,lane,sidewalk";
  std::string out;
  int stride = 2;
  int samples = 192;
};

int cmd_export_ply(const ExportArgs& a, int threads) {
  const VoxelField field = load_checkpoint(a.checkpoint);
  const Dataset data = load_dataset(a.data);
  const auto classes = parse_classes(a.classes, data.manifest().class_table);
  const auto rays = ground_truth_rays(data, data.manifest().frames_in(Split::kVal), a.stride);
  const PointPair pair = filtered_point_pair(field, rays, classes, a.samples, threads);
  fs::path gt_path = fs::path(a.out);
  gt_path.replace_filename(gt_path.stem().string() + "_gt" + gt_path.extension().string());
  write_ply(a.out, pair.predicted);
  write_ply(gt_path, pair.ground_truth);
  std::printf("wrote %zu points -> %s, %s\n", pair.predicted.size(), a.out.c_str(), gt_path.c_str());
  return 0;
}

void report_error(const GlobalOptions& g, const std::string& msg, int code) {
  if (g.json_errors)
    std::cerr << nlohmann::json{{"error", msg}, {"exit_code", code}}.dump() << '\n';
  else
    std::cerr << "error: " << msg << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Plane-regularized voxel radiance fields: data generation, training, evaluation"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--threads", g.threads, "Worker threads (default: PLANEREG_THREADS or hardware concurrency)");
  app.add_flag("--json", g.json_errors, "Report errors on stderr as single-line JSON");
  app.add_option("--config", g.config, "Flat JSON file of option values; command-line flags take precedence");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a procedural dataset");
  gen_cmd->add_option("--preset", gen.preset, "Scene preset (flat-road, slanted-road, curb)")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory");
  gen_cmd->add_option("--frames", gen.frames, "Stereo frames")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--dropout", gen.dropout, "Fraction of non-validation frames dropped")->capture_default_str();
  gen_cmd->add_option("--label-noise", gen.label_noise, "Probability of flipping a pixel's semantic label")->capture_default_str();
  gen_cmd->add_option("--style", gen.style, "Trajectory: line-with-jitter or arc")->capture_default_str();
  gen_cmd->add_option("--width", gen.width)->capture_default_str();
  gen_cmd->add_option("--height", gen.height)->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a voxel field on a dataset");
  train_cmd->add_option("--data", tr.data, "Dataset directory");
  train_cmd->add_option("--out", tr.out, "Output directory for checkpoints and logs");
  train_cmd->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  train_cmd->add_option("--batch", tr.cfg.batch_patches, "Patches per step")->capture_default_str();
  train_cmd->add_option("--patch", tr.cfg.patch_size, "Patch side in pixels")->capture_default_str();
  train_cmd->add_option("--lr-start", tr.cfg.lr_start)->capture_default_str();
  train_cmd->add_option("--lr-end", tr.cfg.lr_end)->capture_default_str();
  train_cmd->add_option("--density-lr-scale", tr.cfg.density_lr_scale)->capture_default_str();
  train_cmd->add_option("--color-lr-scale", tr.cfg.color_lr_scale)->capture_default_str();
  train_cmd->add_option("--lambda0", tr.cfg.weights.lambda0, "dSSIM weight")->capture_default_str();
  train_cmd->add_option("--lambda1", tr.cfg.weights.lambda1, "Plane regularizer weight")->capture_default_str();
  train_cmd->add_option("--svd-delay", tr.cfg.weights.svd_delay_epochs, "Epochs before the regularizer starts")->capture_default_str();
  train_cmd->add_flag("--no-svd", tr.no_svd, "Disable the plane regularizer (lambda1 = 0)");
  train_cmd->add_flag("--no-dssim", tr.no_dssim, "Disable dSSIM (lambda0 = 0)");
  train_cmd->add_flag("--ds-baseline", tr.ds_baseline, "Use depth smoothness in place of the plane regularizer");
  train_cmd->add_option("--samples", tr.cfg.n_samples_train, "Samples per training ray")->capture_default_str();
  train_cmd->add_option("--eval-samples", tr.cfg.n_samples_eval, "Samples per validation ray")->capture_default_str();
  train_cmd->add_option("--patience", tr.cfg.early_stop_patience)->capture_default_str();
  train_cmd->add_option("--grid", tr.grid, "Grid nodes per axis")->capture_default_str();
  train_cmd->add_option("--init-density", tr.cfg.init_density_raw)->capture_default_str();
  train_cmd->add_option("--seed", tr.cfg.seed)->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's validation split");
  eval_cmd->add_option("--data", ev.data, "Dataset directory");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Field checkpoint (.plnf)");
  eval_cmd->add_option("--out", ev.out, "CSV report (rows are appended)")->capture_default_str();
  eval_cmd->add_option("--variant", ev.variant, "Variant name for the report row")->capture_default_str();
  eval_cmd->add_option("--classes", ev.classes, "Evaluated classes (names or ids)")->capture_default_str();
  eval_cmd->add_option("--stride", ev.stride, "Ground-truth ray stride in pixels")->capture_default_str();
  eval_cmd->add_option("--samples", ev.samples)->capture_default_str();

  RenderArgs rd;
  auto* render_cmd = app.add_subcommand("render", "Render RGB and depth images from a checkpoint");
  render_cmd->add_option("--checkpoint", rd.checkpoint, "Field checkpoint (.plnf)");
  render_cmd->add_option("--poses", rd.poses, "'val' or a pose JSON file")->capture_default_str();
  render_cmd->add_option("--data", rd.data, "Dataset directory (for --poses val)");
  render_cmd->add_option("--out", rd.out, "Output directory");
  render_cmd->add_option("--samples", rd.samples)->capture_default_str();

  ExportArgs ex;
  auto* ply_cmd = app.add_subcommand("export-ply", "Export predicted and ground-truth point clouds as PLY");
  ply_cmd->add_option("--checkpoint", ex.checkpoint, "Field checkpoint (.plnf)");
  ply_cmd->add_option("--data", ex.data, "Dataset directory");
  ply_cmd->add_option("--classes", ex.classes, "Classes to export (names or ids)")->capture_default_str();
  ply_cmd->add_option("--out", ex.out, "Predicted cloud path; ground truth goes to <stem>_gt.ply");
  ply_cmd->add_option("--stride", ex.stride)->capture_default_str();
  ply_cmd->add_option("--samples", ex.samples)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(g, e.what(), 2);
    return 2;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    if (!g.config.empty()) apply_config_file(g.config, app, *cmd);
    auto require = [&](const std::string& value, const char* flag) {
      if (value.empty()) throw InputError(std::string("missing required option ") + flag);
    };
    const int threads = threads_or_default(g.threads);
    if (cmd == gen_cmd) {
      require(gen.out, "--out");
      return cmd_gen_data(gen);
    }
    if (cmd == train_cmd) {
      require(tr.data, "--data");
      require(tr.out, "--out");
      return cmd_train(tr, threads);
    }
    if (cmd == eval_cmd) {
      require(ev.data, "--data");
      require(ev.checkpoint, "--checkpoint");
      return cmd_eval(ev, threads);
    }
    if (cmd == render_cmd) {
      require(rd.checkpoint, "--checkpoint");
      require(rd.out, "--out");
      return cmd_render(rd, threads);
    }
    if (cmd == ply_cmd) {
      require(ex.checkpoint, "--checkpoint");
      require(ex.data, "--data");
      require(ex.out, "--out");
      return cmd_export_ply(ex, threads);
    }
  } catch (const InputError& e) {
    report_error(g, e.what(), 2);
    return 2;
  } catch (const std::exception& e) {
    report_error(g, e.what(), 1);
    return 1;
  }
  return 1;
}
