// Image and raster file I/O: 8-bit RGB PNG, 8-bit label PNG, 16-bit depth PNG
// (millimeters), and raw little-endian float32 depth.
#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "planereg/error.hpp"
#include "planereg/image.hpp"

namespace planereg::io {

namespace detail {

inline void write_png(const std::filesystem::path& path, int width, int height, png_uint_32 format, const void* buffer) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buffer, 0, nullptr))
    throw Error("failed to write PNG " + path.string() + ": " + img.message);
}

template <typename T>
std::vector<T> read_png(const std::filesystem::path& path, png_uint_32 format, int& width, int& height) {
  if (!std::filesystem::exists(path)) throw InputError("missing file: " + path.string());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw InputError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = format;
  std::vector<T> buffer(PNG_IMAGE_SIZE(img) / sizeof(T));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr))
    throw InputError("cannot decode PNG " + path.string() + ": " + img.message);
  width = static_cast<int>(img.width);
  height = static_cast<int>(img.height);
  return buffer;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace detail

inline void write_rgb_png(const std::filesystem::path& path, const ColorImage& img) {
  std::vector<std::uint8_t> buf(img.size() * 3);
  for (std::size_t i = 0; i < img.size(); ++i)
    for (int c = 0; c < 3; ++c) buf[i * 3 + static_cast<std::size_t>(c)] = detail::to_byte(img.data[i][c]);
  detail::write_png(path, img.width, img.height, PNG_FORMAT_RGB, buf.data());
}

inline ColorImage read_rgb_png(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto buf = detail::read_png<std::uint8_t>(path, PNG_FORMAT_RGB, w, h);
  ColorImage img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i)
    img.data[i] = {buf[i * 3] / 255.0, buf[i * 3 + 1] / 255.0, buf[i * 3 + 2] / 255.0};
  return img;
}

inline void write_label_png(const std::filesystem::path& path, const LabelImage& img) {
  detail::write_png(path, img.width, img.height, PNG_FORMAT_GRAY, img.data.data());
}

inline LabelImage read_label_png(const std::filesystem::path& path) {
  int w = 0, h = 0;
  auto buf = detail::read_png<std::uint8_t>(path, PNG_FORMAT_GRAY, w, h);
  LabelImage img(w, h);
  img.data = std::move(buf);
  return img;
}

/// 16-bit grayscale depth; stored value = round(meters * 1000), saturating.
inline void write_depth_png(const std::filesystem::path& path, const DepthImage& img) {
  std::vector<std::uint16_t> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    buf[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img.data[i] * 1000.0, 0.0, 65535.0)));
  detail::write_png(path, img.width, img.height, PNG_FORMAT_LINEAR_Y, buf.data());
}

inline DepthImage read_depth_png(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto buf = detail::read_png<std::uint16_t>(path, PNG_FORMAT_LINEAR_Y, w, h);
  DepthImage img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = buf[i] / 1000.0;
  return img;
}

/// Row-major little-endian float32 meters, no header; dimensions come from the caller.
inline void write_depth_bin(const std::filesystem::path& path, const DepthImage& img) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  std::vector<float> buf(img.data.begin(), img.data.end());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw Error("failed writing " + path.string());
}

inline DepthImage read_depth_bin(const std::filesystem::path& path, int width, int height) {
  if (!std::filesystem::exists(path)) throw InputError("missing file: " + path.string());
  DepthImage img(width, height);
  const auto expected = img.size() * sizeof(float);
  if (std::filesystem::file_size(path) != expected) throw InputError("depth file has wrong size: " + path.string());
  std::vector<float> buf(img.size());
  std::ifstream is(path, std::ios::binary);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
  if (!is) throw InputError("failed reading " + path.string());
  std::copy(buf.begin(), buf.end(), img.data.begin());
  return img;
}

}  // namespace planereg::io
