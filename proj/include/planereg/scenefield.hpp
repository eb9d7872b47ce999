// Dense voxel radiance field: trilinearly interpolated raw parameters on the
// grid nodes, softplus density and sigmoid color, with an exact reverse pass.
#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "planereg/error.hpp"
#include "planereg/vec3.hpp"

namespace planereg {

struct GridResolution {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  friend bool operator==(const GridResolution&, const GridResolution&) = default;
};

struct Aabb {
  Vec3 min;
  Vec3 max;

  bool contains(const Vec3& p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y && p.z >= min.z && p.z <= max.z;
  }
  double diameter() const { return norm(max - min); }
  friend bool operator==(const Aabb&, const Aabb&) = default;
};

struct FieldSample {
  double sigma = 0.0;
  Vec3 rgb;
};

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Trilinear footprint of one query point: the 8 touched nodes and their weights.
struct Stencil {
  bool inside = false;
  std::array<std::size_t, 8> node{};
  std::array<double, 8> weight{};
};

/// Raw parameters are stored interleaved per node as (density, r, g, b),
/// nodes in x-fastest order. Gradients use the same layout.
class VoxelField {
 public:
  static constexpr std::size_t kChannels = 4;

  VoxelField() = default;
  VoxelField(GridResolution res, Aabb bbox) : res_(res), bbox_(bbox) {
    if (res.nx < 2 || res.ny < 2 || res.nz < 2)
      throw InputError("voxel field resolution must be at least 2 per axis");
    if (!(bbox.min.x < bbox.max.x && bbox.min.y < bbox.max.y && bbox.min.z < bbox.max.z))
      throw InputError("voxel field bbox min must be below max on every axis");
    raw_.assign(res.count() * kChannels, 0.0);
    spacing_ = {(bbox.max.x - bbox.min.x) / (res.nx - 1), (bbox.max.y - bbox.min.y) / (res.ny - 1),
                (bbox.max.z - bbox.min.z) / (res.nz - 1)};
  }

  const GridResolution& resolution() const { return res_; }
  const Aabb& bbox() const { return bbox_; }
  std::size_t node_count() const { return res_.count(); }
  const Vec3& spacing() const { return spacing_; }

  std::size_t node_index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(res_.nx) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(res_.ny) * static_cast<std::size_t>(k));
  }
  Vec3 node_position(int i, int j, int k) const {
    return {bbox_.min.x + i * spacing_.x, bbox_.min.y + j * spacing_.y, bbox_.min.z + k * spacing_.z};
  }

  double& density_raw(std::size_t node) { return raw_[node * kChannels]; }
  double density_raw(std::size_t node) const { return raw_[node * kChannels]; }
  double& color_raw(std::size_t node, int c) { return raw_[node * kChannels + 1 + static_cast<std::size_t>(c)]; }
  double color_raw(std::size_t node, int c) const { return raw_[node * kChannels + 1 + static_cast<std::size_t>(c)]; }

  std::vector<double>& params() { return raw_; }
  const std::vector<double>& params() const { return raw_; }

  Stencil locate(const Vec3& x) const {
    Stencil s;
    if (!bbox_.contains(x)) return s;
    s.inside = true;
    const double fx = (x.x - bbox_.min.x) / spacing_.x;
    const double fy = (x.y - bbox_.min.y) / spacing_.y;
    const double fz = (x.z - bbox_.min.z) / spacing_.z;
    const int i = std::min(static_cast<int>(fx), res_.nx - 2);
    const int j = std::min(static_cast<int>(fy), res_.ny - 2);
    const int k = std::min(static_cast<int>(fz), res_.nz - 2);
    const double tx = fx - i;
    const double ty = fy - j;
    const double tz = fz - k;
    const std::size_t base = node_index(i, j, k);
    const std::size_t sy = static_cast<std::size_t>(res_.nx);
    const std::size_t sz = sy * static_cast<std::size_t>(res_.ny);
    s.node = {base, base + 1, base + sy, base + sy + 1, base + sz, base + sz + 1, base + sz + sy, base + sz + sy + 1};
    s.weight = {(1 - tx) * (1 - ty) * (1 - tz), tx * (1 - ty) * (1 - tz), (1 - tx) * ty * (1 - tz), tx * ty * (1 - tz),
                (1 - tx) * (1 - ty) * tz,       tx * (1 - ty) * tz,       (1 - tx) * ty * tz,       tx * ty * tz};
    return s;
  }

  /// Interpolated raw (density, r, g, b) at a stencil.
  std::array<double, 4> interpolate(const Stencil& s) const {
    std::array<double, 4> v{};
    if (!s.inside) return v;
    for (int c = 0; c < 8; ++c) {
      const double* p = &raw_[s.node[static_cast<std::size_t>(c)] * kChannels];
      const double w = s.weight[static_cast<std::size_t>(c)];
      v[0] += w * p[0];
      v[1] += w * p[1];
      v[2] += w * p[2];
      v[3] += w * p[3];
    }
    return v;
  }

 private:
  GridResolution res_;
  Aabb bbox_;
  Vec3 spacing_;
  std::vector<double> raw_;
};

struct ParamGrad {
  std::vector<double> values;  // same layout as VoxelField::params()

  ParamGrad() = default;
  explicit ParamGrad(const VoxelField& field) : values(field.params().size(), 0.0) {}

  double& density_grad(std::size_t node) { return values[node * VoxelField::kChannels]; }
  double density_grad(std::size_t node) const { return values[node * VoxelField::kChannels]; }
  double& color_grad(std::size_t node, int c) { return values[node * VoxelField::kChannels + 1 + static_cast<std::size_t>(c)]; }
  double color_grad(std::size_t node, int c) const {
    return values[node * VoxelField::kChannels + 1 + static_cast<std::size_t>(c)];
  }

  bool matches(const VoxelField& field) const { return values.size() == field.params().size(); }
  void zero() { std::fill(values.begin(), values.end(), 0.0); }
  ParamGrad& operator+=(const ParamGrad& o) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
    return *this;
  }
};

inline VoxelField init_field(GridResolution res, Aabb bbox, double init_density_raw = -2.0, std::uint64_t seed = 0) {
  VoxelField field(res, bbox);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> color(-0.1, 0.1);
  for (std::size_t n = 0; n < field.node_count(); ++n) {
    field.density_raw(n) = init_density_raw;
    for (int c = 0; c < 3; ++c) field.color_raw(n, c) = color(rng);
  }
  return field;
}

/// Activations applied to an interpolated raw vector.
inline FieldSample activate(const std::array<double, 4>& raw) {
  return {softplus(raw[0]), {sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])}};
}

inline FieldSample query(const VoxelField& field, const Vec3& x) {
  const Stencil s = field.locate(x);
  if (!s.inside) return {};
  return activate(field.interpolate(s));
}

/// Backpropagates (d_sigma, d_rgb) through the activations at `raw` and the
/// trilinear weights of `s` into `accum`.
inline void scatter_backward(const Stencil& s, const std::array<double, 4>& raw, double d_sigma, const Vec3& d_rgb,
                             ParamGrad& accum) {
  if (!s.inside) return;
  std::array<double, 4> g{};
  g[0] = d_sigma * sigmoid(raw[0]);
  for (int c = 0; c < 3; ++c) {
    const double sg = sigmoid(raw[static_cast<std::size_t>(c) + 1]);
    g[static_cast<std::size_t>(c) + 1] = d_rgb[c] * sg * (1.0 - sg);
  }
  for (int c = 0; c < 8; ++c) {
    double* p = &accum.values[s.node[static_cast<std::size_t>(c)] * VoxelField::kChannels];
    const double w = s.weight[static_cast<std::size_t>(c)];
    p[0] += w * g[0];
    p[1] += w * g[1];
    p[2] += w * g[2];
    p[3] += w * g[3];
  }
}

inline void query_backward(const VoxelField& field, const Vec3& x, double d_sigma, const Vec3& d_rgb, ParamGrad& accum) {
  if (!accum.matches(field)) throw InputError("gradient buffer shape does not match field");
  const Stencil s = field.locate(x);
  if (!s.inside) return;
  scatter_backward(s, field.interpolate(s), d_sigma, d_rgb, accum);
}

// ---------------------------------------------------------------------------
// Checkpoint file: "PLNF", u32 version, 3 x u32 resolution, 6 x f64 bbox
// (min xyz, max xyz), then density_raw and color_raw as little-endian f32,
// nodes in x-fastest order, color channels interleaved per node.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw InputError("truncated checkpoint: " + path);
  return value;
}

}  // namespace detail

inline void save_checkpoint(const VoxelField& field, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  os.write("PLNF", 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  const auto& r = field.resolution();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.nx));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.ny));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.nz));
  const auto& b = field.bbox();
  for (double v : {b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z}) detail::write_le<double>(os, v);
  for (std::size_t n = 0; n < field.node_count(); ++n)
    detail::write_le<float>(os, static_cast<float>(field.density_raw(n)));
  for (std::size_t n = 0; n < field.node_count(); ++n)
    for (int c = 0; c < 3; ++c) detail::write_le<float>(os, static_cast<float>(field.color_raw(n, c)));
  if (!os) throw Error("failed writing checkpoint: " + path.string());
}

inline VoxelField load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PLNF", 4) != 0) throw InputError("not a field checkpoint: " + path.string());
  const auto version = detail::read_le<std::uint32_t>(is, path.string());
  if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version in " + path.string());
  GridResolution r;
  r.nx = static_cast<int>(detail::read_le<std::uint32_t>(is, path.string()));
  r.ny = static_cast<int>(detail::read_le<std::uint32_t>(is, path.string()));
  r.nz = static_cast<int>(detail::read_le<std::uint32_t>(is, path.string()));
  std::array<double, 6> b{};
  for (auto& v : b) v = detail::read_le<double>(is, path.string());
  VoxelField field(r, Aabb{{b[0], b[1], b[2]}, {b[3], b[4], b[5]}});
  for (std::size_t n = 0; n < field.node_count(); ++n) field.density_raw(n) = detail::read_le<float>(is, path.string());
  for (std::size_t n = 0; n < field.node_count(); ++n)
    for (int c = 0; c < 3; ++c) field.color_raw(n, c) = detail::read_le<float>(is, path.string());
  return field;
}

}  // namespace planereg
