#include "rapforge/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

// libpng reports errors through longjmp, so every call sequence lives in a
// plain function with no destructible locals. The C++ wrappers own all
// buffers and translate failures into IoError.

namespace rapforge {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void quiet_warn(png_structp, png_const_charp) {}

struct HeaderInfo {
  png_uint_32 w = 0, h = 0;
  int color = 0, depth = 0;
};

bool read_header_raw(png_structp png, png_infop info, FILE* f, HeaderInfo* hdr) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, f);
  png_read_info(png, info);
  hdr->w = png_get_image_width(png, info);
  hdr->h = png_get_image_height(png, info);
  hdr->color = png_get_color_type(png, info);
  hdr->depth = png_get_bit_depth(png, info);
  return true;
}

bool read_indexed_raw(png_structp png, png_infop info, png_bytepp rows,
                      png_color** palette, int* n_pal) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_packing(png);
  png_read_update_info(png, info);
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  png_get_PLTE(png, info, palette, n_pal);
  return true;
}

bool read_rgb_raw(png_structp png, png_infop info, int color, int depth,
                  png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  return true;
}

bool write_raw(png_structp png, png_infop info, FILE* f, int h, int w,
               int color_type, png_color* palette, int n_pal,
               png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
               8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  if (palette) png_set_PLTE(png, info, palette, n_pal);
  png_write_info(png, info);
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  return true;
}

struct ReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~ReadGuard() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};
struct WriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~WriteGuard() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

}  // namespace

PngImage read_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);

  ReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, quiet_warn);
  if (!g.png) throw IoError("png_create_read_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("png_create_info_struct failed");

  HeaderInfo hdr;
  if (!read_header_raw(g.png, g.info, f.get(), &hdr))
    throw IoError(path + ": not a valid PNG");
  if (hdr.w == 0 || hdr.h == 0 || hdr.w > 1 << 20 || hdr.h > 1 << 20)
    throw FormatError(path + ": unreasonable dimensions");

  PngImage out;
  out.h = static_cast<int>(hdr.h);
  out.w = static_cast<int>(hdr.w);
  out.indexed = (hdr.color == PNG_COLOR_TYPE_PALETTE && hdr.depth <= 8);

  std::vector<png_bytep> rows(hdr.h);
  if (out.indexed) {
    out.indices.resize(static_cast<size_t>(out.h) * out.w);
    for (png_uint_32 y = 0; y < hdr.h; ++y)
      rows[y] = out.indices.data() + static_cast<size_t>(y) * out.w;
    png_color* palette = nullptr;
    int n_pal = 0;
    if (!read_indexed_raw(g.png, g.info, rows.data(), &palette, &n_pal))
      throw IoError(path + ": corrupt PNG data");
    out.rgb.assign(static_cast<size_t>(out.h) * out.w * 3, 0);
    for (size_t i = 0; i < out.indices.size(); ++i) {
      const int idx = out.indices[i];
      if (idx < n_pal) {
        out.rgb[i * 3 + 0] = palette[idx].red;
        out.rgb[i * 3 + 1] = palette[idx].green;
        out.rgb[i * 3 + 2] = palette[idx].blue;
      }
    }
  } else {
    out.rgb.resize(static_cast<size_t>(out.h) * out.w * 3);
    for (png_uint_32 y = 0; y < hdr.h; ++y)
      rows[y] = out.rgb.data() + static_cast<size_t>(y) * out.w * 3;
    if (!read_rgb_raw(g.png, g.info, hdr.color, hdr.depth, rows.data()))
      throw IoError(path + ": corrupt PNG data");
  }
  return out;
}

void write_png_rgb(const std::string& path, int h, int w,
                   const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(h) * w * 3)
    throw ShapeError("write_png_rgb: buffer size does not match dims");
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open " + path + " for writing");

  WriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, quiet_warn);
  if (!g.png) throw IoError("png_create_write_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("png_create_info_struct failed");

  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(rgb.data() + static_cast<size_t>(y) * w * 3);
  if (!write_raw(g.png, g.info, f.get(), h, w, PNG_COLOR_TYPE_RGB, nullptr, 0,
                 rows.data()))
    throw IoError(path + ": PNG write failed");
}

void write_png_indexed(const std::string& path, int h, int w,
                       const std::vector<uint8_t>& indices,
                       const std::vector<std::array<uint8_t, 3>>& palette) {
  if (indices.size() != static_cast<size_t>(h) * w)
    throw ShapeError("write_png_indexed: buffer size does not match dims");
  if (palette.empty() || palette.size() > 256)
    throw ParameterError("write_png_indexed: palette must hold 1..256 entries");
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open " + path + " for writing");

  WriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, quiet_warn);
  if (!g.png) throw IoError("png_create_write_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("png_create_info_struct failed");

  std::vector<png_color> pal(palette.size());
  for (size_t i = 0; i < palette.size(); ++i)
    pal[i] = {palette[i][0], palette[i][1], palette[i][2]};
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(indices.data() + static_cast<size_t>(y) * w);
  if (!write_raw(g.png, g.info, f.get(), h, w, PNG_COLOR_TYPE_PALETTE, pal.data(),
                 static_cast<int>(pal.size()), rows.data()))
    throw IoError(path + ": PNG write failed");
}

}  // namespace rapforge
