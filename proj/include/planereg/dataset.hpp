// Procedural street scenes with exact ground truth, stereo trajectories, and
// the on-disk dataset layout (manifest.json + rgb/ sem/ depth/).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "planereg/error.hpp"
#include "planereg/image.hpp"
#include "planereg/io.hpp"
#include "planereg/losses.hpp"
#include "planereg/parallel.hpp"
#include "planereg/renderer.hpp"
#include "planereg/scenefield.hpp"
#include "planereg/vec3.hpp"

namespace planereg {

namespace classes {
inline constexpr int kBackground = 0;
inline constexpr int kRoad = 1;
inline constexpr int kLane = 2;
inline constexpr int kSidewalk = 3;
inline constexpr int kBuilding = 4;
}  // namespace classes

inline std::map<int, std::string> default_class_table() {
  return {{classes::kBackground, "background"},
          {classes::kRoad, "road"},
          {classes::kLane, "lane"},
          {classes::kSidewalk, "sidewalk"},
          {classes::kBuilding, "building"}};
}

inline SemanticGroups default_semantic_groups() {
  return {{{"ground", {classes::kRoad, classes::kLane, classes::kSidewalk}}}};
}

struct Texture {
  enum class Kind { kUniform, kStripes, kChecker };
  Kind kind = Kind::kUniform;
  Vec3 color{0.5, 0.5, 0.5};
  Vec3 alt_color{0.2, 0.2, 0.2};  // checker only
  double period = 1.0;           // meters
  double phase = 0.0;            // meters, stripes only
  double duty = 0.5;             // stripes: painted fraction; the rest is see-through
};

/// Rectangle centered at `center`, spanned by unit axes u and v with half
/// extents; normal = u x v.
struct PlanePrimitive {
  Vec3 center;
  Vec3 u{1, 0, 0};
  Vec3 v{0, 1, 0};
  double half_u = 1.0;
  double half_v = 1.0;
  Vec3 normal() const { return cross(u, v); }
};

struct BoxPrimitive {
  Aabb box;
};

struct Primitive {
  enum class Kind { kPlane, kBox };
  Kind kind = Kind::kPlane;
  PlanePrimitive plane;
  BoxPrimitive box;
  int class_id = 0;
  int priority = 0;  // wins ties between coplanar hits
  Texture texture;
};

struct SceneSpec {
  std::string preset;
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;
  double ambient = 1.0;
  Aabb bounds;  // region the radiance field covers

  void validate() const {
    if (primitives.empty()) throw InputError("scene has no primitives");
    for (const auto& p : primitives) {
      if (p.kind == Primitive::Kind::kPlane && !(p.plane.half_u > 0 && p.plane.half_v > 0))
        throw InputError("plane extents must be positive");
      if (p.kind == Primitive::Kind::kBox &&
          !(p.box.box.min.x < p.box.box.max.x && p.box.box.min.y < p.box.box.max.y && p.box.box.min.z < p.box.box.max.z))
        throw InputError("box extents must be positive");
    }
  }
};

inline const std::vector<std::string>& scene_presets() {
  static const std::vector<std::string> presets{"flat-road", "slanted-road", "curb"};
  return presets;
}

/// Hit record of the nearest surface along a ray.
struct SurfaceHit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 color;
  int class_id = classes::kBackground;
  int priority = std::numeric_limits<int>::min();
  bool hit() const { return std::isfinite(t); }
};

namespace detail {

inline Vec3 texture_color(const Texture& tex, double a, double b, bool& visible) {
  visible = true;
  switch (tex.kind) {
    case Texture::Kind::kUniform:
      return tex.color;
    case Texture::Kind::kStripes: {
      const double f = (b + tex.phase) / tex.period;
      visible = (f - std::floor(f)) < tex.duty;
      return tex.color;
    }
    case Texture::Kind::kChecker: {
      const auto ia = static_cast<long long>(std::floor(a / tex.period));
      const auto ib = static_cast<long long>(std::floor(b / tex.period));
      return ((ia + ib) & 1) ? tex.alt_color : tex.color;
    }
  }
  return tex.color;
}

inline void consider(SurfaceHit& best, double t, const Vec3& color, const Primitive& prim) {
  const double tol = 1e-9 * std::max(1.0, t);
  if (t < best.t - tol || (std::abs(t - best.t) <= tol && prim.priority > best.priority)) {
    best.t = t;
    best.color = color;
    best.class_id = prim.class_id;
    best.priority = prim.priority;
  }
}

inline void intersect_plane(const Primitive& prim, const Vec3& o, const Vec3& d, double t_min, SurfaceHit& best) {
  const auto& pl = prim.plane;
  const Vec3 n = pl.normal();
  const double denom = dot(d, n);
  if (std::abs(denom) < 1e-12) return;
  const double t = dot(pl.center - o, n) / denom;
  if (!(t > t_min)) return;
  const Vec3 rel = o + t * d - pl.center;
  const double a = dot(rel, pl.u);
  const double b = dot(rel, pl.v);
  if (std::abs(a) > pl.half_u || std::abs(b) > pl.half_v) return;
  bool visible = true;
  const Vec3 c = texture_color(prim.texture, a, b, visible);
  if (visible) consider(best, t, c, prim);
}

inline void intersect_box(const Primitive& prim, const Vec3& o, const Vec3& d, double t_min, SurfaceHit& best) {
  const auto& bx = prim.box.box;
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (o[k] < bx.min[k] || o[k] > bx.max[k]) return;
      continue;
    }
    double ta = (bx.min[k] - o[k]) / d[k];
    double tb = (bx.max[k] - o[k]) / d[k];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis = k;
    }
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || axis < 0 || !(t0 > t_min)) return;  // origin inside boxes is not supported
  const Vec3 p = o + t0 * d;
  // Face-local coordinates: the two axes other than the hit axis.
  const int ka = axis == 0 ? 1 : 0;
  const int kb = axis == 2 ? 1 : 2;
  bool visible = true;
  const Vec3 c = texture_color(prim.texture, p[ka], p[kb], visible);
  if (visible) consider(best, t0, c, prim);
}

}  // namespace detail

/// Nearest primitive hit along a unit-direction ray.
inline SurfaceHit trace_scene(const SceneSpec& spec, const Vec3& origin, const Vec3& dir, double t_min = 1e-6) {
  SurfaceHit best;
  for (const auto& prim : spec.primitives) {
    if (prim.kind == Primitive::Kind::kPlane)
      detail::intersect_plane(prim, origin, dir, t_min, best);
    else
      detail::intersect_box(prim, origin, dir, t_min, best);
  }
  if (best.hit()) best.color = best.color * spec.ambient;
  return best;
}

namespace detail {

inline Primitive ground_quad(const Vec3& center, const Mat3& tilt, double half_x, double half_y, int class_id,
                             int priority, Texture tex) {
  Primitive p;
  p.kind = Primitive::Kind::kPlane;
  p.plane.center = center;
  p.plane.u = tilt * Vec3{1, 0, 0};
  p.plane.v = tilt * Vec3{0, 1, 0};
  p.plane.half_u = half_x;
  p.plane.half_v = half_y;
  p.class_id = class_id;
  p.priority = priority;
  p.texture = tex;
  return p;
}

inline Primitive box(const Vec3& lo, const Vec3& hi, int class_id, Texture tex) {
  Primitive p;
  p.kind = Primitive::Kind::kBox;
  p.box.box = {lo, hi};
  p.class_id = class_id;
  p.priority = 0;
  p.texture = tex;
  return p;
}

}  // namespace detail

/// Street scene along +y with z up. Road spans x in [-3.5, 3.5], sidewalks
/// out to |x| = 5.5, facades beyond. Presets:
///   flat-road    everything on z = 0
///   slanted-road ground tilted 5 degrees about x, normal (0, sin 5, cos 5)
///   curb         sidewalks raised 0.15 m as solid curbs
inline SceneSpec generate_scene(const std::string& preset, std::uint64_t seed = 0) {
  const auto& known = scene_presets();
  if (std::find(known.begin(), known.end(), preset) == known.end()) {
    std::string list;
    for (const auto& p : known) list += (list.empty() ? "" : ", ") + p;
    throw InputError("unknown preset '" + preset + "'; available presets: " + list);
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  SceneSpec spec;
  spec.preset = preset;
  spec.seed = seed;
  spec.ambient = 1.0;

  const double y_lo = -2.0;
  const double y_hi = 20.0;
  const double y_mid = 0.5 * (y_lo + y_hi);
  const double half_len = 0.5 * (y_hi - y_lo);
  const double grade = preset == "slanted-road" ? -5.0 * std::numbers::pi / 180.0 : 0.0;
  const Mat3 tilt = axis_angle({1, 0, 0}, grade);
  const double pivot_y = 3.5;  // middle of the default camera path
  auto ground_point = [&](double x, double y) { return tilt * Vec3{x, y - pivot_y, 0.0} + Vec3{0, pivot_y, 0}; };

  const double gray = jitter(0.33, 0.38);
  Texture road_tex{Texture::Kind::kUniform, {gray, gray, gray * 1.04}};
  Texture paint{Texture::Kind::kUniform, {0.92, 0.92, 0.88}};
  Texture dashes{Texture::Kind::kStripes, {0.92, 0.92, 0.88}, {}, 3.0, jitter(0.0, 3.0), 0.5};
  Texture walk_tex{Texture::Kind::kUniform, {0.62, 0.58, 0.52}};

  spec.primitives.push_back(detail::ground_quad(ground_point(0, y_mid), tilt, 3.5, half_len, classes::kRoad, 1, road_tex));
  spec.primitives.push_back(detail::ground_quad(ground_point(0, y_mid), tilt, 0.08, half_len, classes::kLane, 2, dashes));
  for (double x : {-3.3, 3.3})
    spec.primitives.push_back(detail::ground_quad(ground_point(x, y_mid), tilt, 0.08, half_len, classes::kLane, 2, paint));

  const double curb = preset == "curb" ? 0.15 : 0.0;
  for (double side : {-1.0, 1.0}) {
    if (curb > 0.0) {
      const double x0 = side < 0 ? -5.5 : 3.5;
      spec.primitives.push_back(detail::box({x0, y_lo, -0.2}, {x0 + 2.0, y_hi, curb}, classes::kSidewalk, walk_tex));
    } else {
      spec.primitives.push_back(
          detail::ground_quad(ground_point(side * 4.5, y_mid), tilt, 1.0, half_len, classes::kSidewalk, 1, walk_tex));
    }
  }

  // Facades: two blocks per side with a gap, checkered.
  const double base_z = preset == "slanted-road" ? -2.5 : -0.2;
  for (double side : {-1.0, 1.0}) {
    const double x0 = side < 0 ? -7.5 : 5.5;
    double y = y_lo;
    for (int b = 0; b < 2; ++b) {
      const double len = jitter(8.0, 10.0);
      const double height = jitter(3.0, 4.5);
      const Vec3 c0{jitter(0.55, 0.8), jitter(0.35, 0.55), jitter(0.25, 0.4)};
      Texture facade{Texture::Kind::kChecker, c0, c0 * 0.55, jitter(0.8, 1.2)};
      spec.primitives.push_back(detail::box({x0, y, base_z}, {x0 + 2.0, std::min(y + len, y_hi), height}, classes::kBuilding, facade));
      y += len + jitter(1.0, 2.0);
      if (y >= y_hi) break;
    }
  }

  spec.bounds = {{-8.0, -3.0, preset == "slanted-road" ? -2.5 : -0.5}, {8.0, 21.0, 5.0}};
  spec.validate();
  return spec;
}

struct GroundTruth {
  ColorImage rgb;
  DepthImage depth;  // distance along the unit ray, 0 for background
  LabelImage semantic;
};

inline GroundTruth raytrace_ground_truth(const SceneSpec& spec, const Camera& camera) {
  camera.validate();
  GroundTruth gt{ColorImage(camera.width, camera.height), DepthImage(camera.width, camera.height),
                 LabelImage(camera.width, camera.height)};
  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      const Vec3 dir = camera.direction(x + 0.5, y + 0.5);
      const SurfaceHit hit = trace_scene(spec, camera.center(), dir);
      if (!hit.hit()) continue;
      gt.rgb.at(x, y) = hit.color;
      gt.depth.at(x, y) = hit.t;
      gt.semantic.at(x, y) = static_cast<std::uint8_t>(hit.class_id);
    }
  }
  return gt;
}

enum class TrajectoryStyle { kLineWithJitter, kArc };

struct TrajectoryOptions {
  int width = 160;
  int height = 120;
  double focal = 120.0;
  double baseline = 0.5;
  double height_above_ground = 1.5;
  double step = 0.5;                 // meters between frames
  double pitch_down_deg = 15.0;
  double jitter_deg = 2.0;
};

/// Camera-to-world rotation looking along yaw (from +y toward +x) and pitch (down positive).
inline Mat3 look_rotation(double yaw, double pitch_down) {
  const Vec3 forward{std::sin(yaw) * std::cos(pitch_down), std::cos(yaw) * std::cos(pitch_down), -std::sin(pitch_down)};
  const Vec3 right{std::cos(yaw), -std::sin(yaw), 0.0};
  const Vec3 down = cross(forward, right);
  return Mat3::from_columns(right, down, forward);
}

/// Left/right stereo pairs; camera 2f is the left and 2f+1 the right camera of frame f.
inline std::vector<Camera> generate_trajectory(int n_frames, TrajectoryStyle style, std::uint64_t seed,
                                               const TrajectoryOptions& opt = {}) {
  if (n_frames < 2) throw InputError("trajectory needs at least 2 frames");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jit(-opt.jitter_deg, opt.jitter_deg);
  const double deg = std::numbers::pi / 180.0;
  const double radius = 30.0;

  std::vector<Camera> cams;
  cams.reserve(static_cast<std::size_t>(2 * n_frames));
  for (int f = 0; f < n_frames; ++f) {
    const double s = f * opt.step;
    Vec3 center{0.0, s, opt.height_above_ground};
    double heading = 0.0;
    if (style == TrajectoryStyle::kArc) {
      const double phi = s / radius;
      center = {radius * (1.0 - std::cos(phi)), radius * std::sin(phi), opt.height_above_ground};
      heading = phi;
    }
    const double yaw = heading + jit(rng) * deg;
    const double pitch = (opt.pitch_down_deg + jit(rng)) * deg;
    const Mat3 rot = look_rotation(yaw, pitch);
    const Vec3 right = rot.column(0);
    for (double side : {-0.5, 0.5}) {
      Camera cam;
      cam.fx = cam.fy = opt.focal;
      cam.cx = opt.width / 2.0;
      cam.cy = opt.height / 2.0;
      cam.width = opt.width;
      cam.height = opt.height;
      cam.rotation = rot;
      cam.translation = center + (side * opt.baseline) * right;
      cams.push_back(cam);
    }
  }
  return cams;
}

// ---------------------------------------------------------------------------
// On-disk dataset

inline constexpr int kManifestVersion = 1;

enum class Split { kTrain, kVal, kDropped };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kDropped: return "dropped";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "dropped") return Split::kDropped;
  throw InputError("unknown split '" + s + "'");
}

struct FrameRecord {
  int index = 0;
  int stereo_frame = 0;
  bool left = true;
  Split split = Split::kTrain;
  Camera camera;
  std::string rgb_path;    // relative to the dataset root
  std::string sem_path;
  std::string depth_path;
};

struct DatasetManifest {
  int version = kManifestVersion;
  std::string scene;
  std::uint64_t seed = 0;
  Aabb bbox;
  RayBounds ray_bounds;
  std::map<int, std::string> class_table;
  SemanticGroups semantic_groups;
  std::vector<FrameRecord> frames;

  std::vector<std::size_t> frames_in(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (frames[i].split == s) out.push_back(i);
    return out;
  }
};

struct WriteOptions {
  double dropout = 0.5;
  double label_noise = 0.0;  // probability of replacing a pixel's class with another table class
  std::uint64_t seed = 0;
  double t_near = 0.05;
};

namespace detail {

inline nlohmann::json camera_to_json(const Camera& c) {
  nlohmann::json m = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) m.push_back(c.rotation(r, k));
    m.push_back(c.translation[r]);
  }
  for (double v : {0.0, 0.0, 0.0, 1.0}) m.push_back(v);
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height},
          {"camera_to_world", m}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  const auto& m = j.at("camera_to_world");
  if (!m.is_array() || m.size() != 16) throw InputError("camera_to_world must have 16 entries");
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) c.rotation(r, k) = m.at(static_cast<std::size_t>(r * 4 + k)).get<double>();
    c.translation[r] = m.at(static_cast<std::size_t>(r * 4 + 3)).get<double>();
  }
  c.validate();
  return c;
}

inline std::string frame_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d.%s", index, ext);
  return buf;
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["scene"] = m.scene;
  j["seed"] = m.seed;
  j["bbox"] = {{"min", {m.bbox.min.x, m.bbox.min.y, m.bbox.min.z}}, {"max", {m.bbox.max.x, m.bbox.max.y, m.bbox.max.z}}};
  j["t_near"] = m.ray_bounds.t_near;
  j["t_far"] = m.ray_bounds.t_far;
  auto& ct = j["classes"] = nlohmann::json::array();
  for (const auto& [id, name] : m.class_table) ct.push_back({{"id", id}, {"name", name}});
  auto& gs = j["semantic_groups"] = nlohmann::json::array();
  for (const auto& g : m.semantic_groups.groups) gs.push_back({{"name", g.name}, {"classes", g.classes}});
  auto& fr = j["frames"] = nlohmann::json::array();
  for (const auto& f : m.frames) {
    nlohmann::json r = detail::camera_to_json(f.camera);
    r["index"] = f.index;
    r["stereo_frame"] = f.stereo_frame;
    r["side"] = f.left ? "left" : "right";
    r["split"] = to_string(f.split);
    r["rgb"] = f.rgb_path;
    r["sem"] = f.sem_path;
    r["depth"] = f.depth_path;
    fr.push_back(std::move(r));
  }
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != kManifestVersion) throw InputError("unsupported manifest version");
    m.scene = j.at("scene").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto lo = j.at("bbox").at("min").get<std::vector<double>>();
    const auto hi = j.at("bbox").at("max").get<std::vector<double>>();
    if (lo.size() != 3 || hi.size() != 3) throw InputError("manifest bbox must have 3 components per corner");
    m.bbox = {{lo[0], lo[1], lo[2]}, {hi[0], hi[1], hi[2]}};
    m.ray_bounds = {j.at("t_near").get<double>(), j.at("t_far").get<double>()};
    for (const auto& c : j.at("classes")) m.class_table[c.at("id").get<int>()] = c.at("name").get<std::string>();
    for (const auto& g : j.at("semantic_groups"))
      m.semantic_groups.groups.push_back({g.at("name").get<std::string>(), g.at("classes").get<std::set<int>>()});
    for (const auto& f : j.at("frames")) {
      FrameRecord r;
      r.camera = detail::camera_from_json(f);
      r.index = f.at("index").get<int>();
      r.stereo_frame = f.at("stereo_frame").get<int>();
      r.left = f.at("side").get<std::string>() == "left";
      r.split = parse_split(f.at("split").get<std::string>());
      r.rgb_path = f.at("rgb").get<std::string>();
      r.sem_path = f.at("sem").get<std::string>();
      r.depth_path = f.at("depth").get<std::string>();
      m.frames.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("manifest schema violation: ") + e.what());
  }
  m.semantic_groups.validate();
  for (const auto& g : m.semantic_groups.groups)
    for (int c : g.classes)
      if (!m.class_table.contains(c)) throw InputError("semantic group '" + g.name + "' references unknown class id " + std::to_string(c));
  return m;
}

inline void write_ground_truth(const std::filesystem::path& root, const FrameRecord& f, const GroundTruth& gt) {
  io::write_rgb_png(root / f.rgb_path, gt.rgb);
  io::write_label_png(root / f.sem_path, gt.semantic);
  io::write_depth_bin(root / f.depth_path, gt.depth);
}

/// Renders every camera's ground truth and writes the dataset. Left cameras of
/// odd stereo frames become validation views; of the remaining cameras a
/// seeded `dropout` fraction is marked dropped and the rest train. The
/// manifest is written last.
inline DatasetManifest write_dataset(const SceneSpec& spec, const std::vector<Camera>& cameras,
                                     const std::filesystem::path& out_dir, const WriteOptions& opt = {}) {
  spec.validate();
  if (cameras.empty() || cameras.size() % 2 != 0) throw InputError("cameras must come in left/right pairs");
  if (opt.dropout < 0.0 || opt.dropout >= 1.0) throw InputError("dropout must be in [0, 1)");
  std::error_code ec;
  for (const char* sub : {"rgb", "sem", "depth"}) {
    std::filesystem::create_directories(out_dir / sub, ec);
    if (ec) throw Error("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }

  DatasetManifest m;
  m.scene = spec.preset;
  m.seed = spec.seed;
  m.bbox = spec.bounds;
  m.ray_bounds = {opt.t_near, spec.bounds.diameter()};
  m.class_table = default_class_table();
  m.semantic_groups = default_semantic_groups();

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    FrameRecord f;
    f.index = static_cast<int>(i);
    f.stereo_frame = static_cast<int>(i / 2);
    f.left = i % 2 == 0;
    f.camera = cameras[i];
    f.split = (f.left && f.stereo_frame % 2 == 1) ? Split::kVal : Split::kTrain;
    if (f.split == Split::kTrain) candidates.push_back(i);
    f.rgb_path = "rgb/" + detail::frame_name(f.index, "png");
    f.sem_path = "sem/" + detail::frame_name(f.index, "png");
    f.depth_path = "depth/" + detail::frame_name(f.index, "bin");
    m.frames.push_back(std::move(f));
  }
  std::mt19937_64 rng(opt.seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const auto n_drop = static_cast<std::size_t>(std::floor(opt.dropout * static_cast<double>(candidates.size()) + 0.5));
  for (std::size_t k = 0; k < n_drop && k < candidates.size(); ++k) m.frames[candidates[k]].split = Split::kDropped;

  std::vector<int> class_ids;
  for (const auto& [id, name] : m.class_table) class_ids.push_back(id);
  std::mt19937_64 noise_rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  for (const auto& f : m.frames) {
    GroundTruth gt = raytrace_ground_truth(spec, f.camera);
    if (opt.label_noise > 0.0) {
      for (auto& label : gt.semantic.data) {
        if (coin(noise_rng) >= opt.label_noise) continue;
        std::uniform_int_distribution<std::size_t> other(0, class_ids.size() - 2);
        std::size_t k = other(noise_rng);
        if (class_ids[k] >= label) ++k;
        label = static_cast<std::uint8_t>(class_ids[std::min(k, class_ids.size() - 1)]);
      }
    }
    write_ground_truth(out_dir, f, gt);
  }

  std::ofstream os(out_dir / "manifest.json");
  if (!os) throw Error("cannot write " + (out_dir / "manifest.json").string());
  os << manifest_to_json(m).dump(2) << '\n';
  if (!os) throw Error("failed writing " + (out_dir / "manifest.json").string());
  return m;
}

/// Loaded dataset: validated manifest plus on-demand image access.
class Dataset {
 public:
  Dataset(std::filesystem::path root, DatasetManifest manifest)
      : root_(std::move(root)), manifest_(std::move(manifest)), cache_(manifest_.frames.size()) {}

  const DatasetManifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }
  std::size_t size() const { return manifest_.frames.size(); }
  const FrameRecord& frame(std::size_t i) const { return manifest_.frames.at(i); }

  const ColorImage& rgb(std::size_t i) const {
    auto& c = cache_.at(i);
    if (!c.rgb) {
      c.rgb = io::read_rgb_png(root_ / frame(i).rgb_path);
      check_size(i, c.rgb->width, c.rgb->height, frame(i).rgb_path);
    }
    return *c.rgb;
  }

  const LabelImage& semantic(std::size_t i) const {
    auto& c = cache_.at(i);
    if (!c.sem) {
      LabelImage img = io::read_label_png(root_ / frame(i).sem_path);
      check_size(i, img.width, img.height, frame(i).sem_path);
      for (auto label : img.data)
        if (!manifest_.class_table.contains(label))
          throw InputError("unknown class id " + std::to_string(label) + " in " + (root_ / frame(i).sem_path).string());
      c.sem = std::move(img);
    }
    return *c.sem;
  }

  const DepthImage& depth(std::size_t i) const {
    auto& c = cache_.at(i);
    if (!c.depth) c.depth = io::read_depth_bin(root_ / frame(i).depth_path, frame(i).camera.width, frame(i).camera.height);
    return *c.depth;
  }

  /// Loads every image once; surfaces any missing or malformed file.
  void preload() const {
    for (std::size_t i = 0; i < size(); ++i) {
      rgb(i);
      semantic(i);
      depth(i);
    }
  }

 private:
  struct Cached {
    std::optional<ColorImage> rgb;
    std::optional<LabelImage> sem;
    std::optional<DepthImage> depth;
  };

  void check_size(std::size_t i, int w, int h, const std::string& rel) const {
    if (w != frame(i).camera.width || h != frame(i).camera.height)
      throw InputError("image size does not match camera: " + (root_ / rel).string());
  }

  std::filesystem::path root_;
  DatasetManifest manifest_;
  mutable std::vector<Cached> cache_;
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw InputError("missing manifest: " + path.string());
  std::ifstream is(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("manifest is not valid JSON (" + path.string() + "): " + e.what());
  }
  DatasetManifest m = manifest_from_json(j);
  for (const auto& f : m.frames)
    for (const auto* rel : {&f.rgb_path, &f.sem_path, &f.depth_path})
      if (!std::filesystem::exists(dir / *rel)) throw InputError("missing file: " + (dir / *rel).string());
  if (m.frames_in(Split::kTrain).empty()) throw InputError("dataset has no training frames");
  return Dataset(dir, std::move(m));
}

}  // namespace planereg
