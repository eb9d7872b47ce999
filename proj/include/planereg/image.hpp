#pragma once

#include <cstdint>
#include <vector>

#include "planereg/error.hpp"
#include "planereg/vec3.hpp"

namespace planereg {

/// Row-major 2D raster.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {
    if (w <= 0 || h <= 0) throw InputError("image dimensions must be positive");
  }

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
  }
  T& at(int x, int y) { return data[index(x, y)]; }
  const T& at(int x, int y) const { return data[index(x, y)]; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Image&, const Image&) = default;
};

using ColorImage = Image<Vec3>;        // linear RGB in [0, 1]
using DepthImage = Image<double>;      // meters along the ray, 0 for no hit
using LabelImage = Image<std::uint8_t>;  // semantic class ids

}  // namespace planereg
