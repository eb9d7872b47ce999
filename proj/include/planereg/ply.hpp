// ASCII PLY point clouds with per-vertex uchar colors.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "planereg/error.hpp"
#include "planereg/geometry.hpp"

namespace planereg {

using Rgb8 = std::array<std::uint8_t, 3>;

/// Display color for a semantic class id.
inline Rgb8 class_color(int class_id) {
  switch (class_id) {
    case 1: return {128, 64, 128};   // road
    case 2: return {255, 255, 255};  // lane
    case 3: return {244, 35, 232};   // sidewalk
    case 4: return {70, 70, 70};     // building
    default: return {0, 0, 0};
  }
}

inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path.string());
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
     << "\nproperty float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  char buf[128];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const Rgb8 c = class_color(cloud.has_labels() ? cloud.labels[i] : 0);
    std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f %u %u %u\n", p.x, p.y, p.z, c[0], c[1], c[2]);
    os << buf;
  }
  if (!os) throw Error("failed writing " + path.string());
}

struct PlyVertices {
  std::vector<Vec3> points;
  std::vector<Rgb8> colors;
};

/// Reads the subset of ASCII PLY written by write_ply.
inline PlyVertices read_ply(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open PLY: " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "ply") throw InputError("not a PLY file: " + path.string());
  std::size_t n = 0;
  bool ascii = false;
  while (std::getline(is, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string kind;
      ls >> kind;
      ascii = kind == "ascii";
    } else if (word == "element") {
      std::string name;
      ls >> name >> n;
    }
  }
  if (!ascii) throw InputError("only ASCII PLY is supported: " + path.string());
  PlyVertices out;
  out.points.reserve(n);
  out.colors.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 p;
    unsigned r = 0, g = 0, b = 0;
    if (!(is >> p.x >> p.y >> p.z >> r >> g >> b)) throw InputError("truncated PLY body: " + path.string());
    out.points.push_back(p);
    out.colors.push_back({static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)});
  }
  return out;
}

}  // namespace planereg
