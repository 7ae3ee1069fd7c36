#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rapforge/common.hpp"

namespace rapforge {

// Decoded 8-bit image. For palette PNGs, `indices` carries the original
// palette indices (the label-decoding path relies on them); rgb always
// holds the expanded colors.
struct PngImage {
  int h = 0, w = 0;
  std::vector<uint8_t> rgb;      // h*w*3
  std::vector<uint8_t> indices;  // h*w when the file was palette-coded
  bool indexed = false;
};

PngImage read_png(const std::string& path);

void write_png_rgb(const std::string& path, int h, int w,
                   const std::vector<uint8_t>& rgb);

// Indexed-color (palette) PNG; one byte per pixel.
void write_png_indexed(const std::string& path, int h, int w,
                       const std::vector<uint8_t>& indices,
                       const std::vector<std::array<uint8_t, 3>>& palette);

}  // namespace rapforge
