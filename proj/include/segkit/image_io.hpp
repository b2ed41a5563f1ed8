#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace segkit {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;  // row-major, 8-bit
};

// Binary portable graymap (P5, maxval 255).
GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& img);

// 8-bit grayscale PNG (color type 0). Reader handles all five scanline
// filters; writer emits unfiltered rows.
GrayImage read_png(const std::string& path);
void write_png(const std::string& path, const GrayImage& img);

/// Dispatches on the file's magic bytes (P5 vs PNG signature).
GrayImage read_gray_image(const std::string& path);

}  // namespace segkit
