#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hsf {

/// Interleaved 8-bit raster as stored in a PNG file.
struct Raster8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int row, int col, int ch = 0) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
};

/// Decodes a PNG, expanding palettes and reducing 16-bit samples to 8 bits.
/// Alpha channels are dropped. Throws NotFound or FormatError.
Raster8 read_png(const std::filesystem::path& path);

/// Writes a gray or RGB raster. Output bytes depend only on the raster.
void write_png(const std::filesystem::path& path, const Raster8& raster);

}  // namespace hsf
