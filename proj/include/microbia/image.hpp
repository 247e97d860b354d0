#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace microbia {

/// Interleaved 8-bit raster, row-major, `channels` samples per pixel.
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image8&) const = default;
};

// Binary netpbm: P6 for 3-channel, P5 for 1-channel, maxval 255.
void write_ppm(const std::filesystem::path& path, const Image8& image);
void write_pgm(const std::filesystem::path& path, const Image8& image);
/// Reads P5 or P6; throws IngestionError on anything else.
Image8 read_netpbm(const std::filesystem::path& path);

}  // namespace microbia
