#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cvloc {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Raster() = default;
  Raster(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return &rgb[(y * width + x) * 3]; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const { return &rgb[(y * width + x) * 3]; }

  friend bool operator==(const Raster&, const Raster&) = default;
};

// Row-major single-channel map of doubles, e.g. a heatmap in [0, 1].
struct GrayMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  double& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
};

// Box-filter downsample by an integral factor (source size must be a multiple).
Raster downsample(const Raster& src, std::size_t target_size);

void write_ppm(const std::filesystem::path& path, const Raster& raster);
Raster read_ppm(const std::filesystem::path& path);
std::string encode_ppm(const Raster& raster);
Raster decode_ppm(const std::string& bytes);

// Values are clamped to [0, 1] and quantized to 8 bits.
void write_pgm(const std::filesystem::path& path, const GrayMap& map);
std::string encode_pgm(const GrayMap& map);

// Minimal RGB PNG encoder (zlib-deflated, no filtering).
std::string encode_png(const Raster& raster);

// Blends a [0,1] heatmap over a raster in red; the map is resampled to the raster size.
Raster overlay_heatmap(const Raster& raster, const GrayMap& heat, double opacity = 0.5);

std::string base64_encode(const std::string& bytes);

}  // namespace cvloc
