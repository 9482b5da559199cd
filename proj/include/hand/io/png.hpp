#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "hand/core/error.hpp"
#include "hand/core/tensor.hpp"

namespace hand::io {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

// Reads an 8- or 16-bit grayscale PNG into intensities scaled to [0, 1].
// Color inputs are rejected; this pipeline is single-channel by contract.
inline Tensor read_png_gray(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw input_error("cannot open png: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw input_error("png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw input_error("png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw input_error("malformed png: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_uint_32 width = png_get_image_width(png, info);
  png_uint_32 height = png_get_image_height(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  int color_type = png_get_color_type(png, info);
  if (color_type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw input_error("png is not grayscale: " + path);
  }
  if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (bit_depth == 16) png_set_swap(png);  // libpng delivers big-endian rows
  png_read_update_info(png, info);
  size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> row(rowbytes);
  Tensor img({static_cast<int>(height), static_cast<int>(width)});
  float denom = bit_depth == 16 ? 65535.0f : 255.0f;
  for (png_uint_32 y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    if (bit_depth == 16) {
      const std::uint16_t* r16 = reinterpret_cast<const std::uint16_t*>(row.data());
      for (png_uint_32 x = 0; x < width; ++x)
        img.at(static_cast<int>(y), static_cast<int>(x)) = r16[x] / denom;
    } else {
      for (png_uint_32 x = 0; x < width; ++x)
        img.at(static_cast<int>(y), static_cast<int>(x)) = row[x] / denom;
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// Writes intensities in [0, 1] as 16-bit grayscale. Values outside [0, 1]
// are clamped.
inline void write_png_gray16(const std::string& path, const Tensor& img) {
  if (img.rank() != 2 || img.empty()) throw input_error("png write: need non-empty 2d image");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw input_error("cannot write png: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw input_error("png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw input_error("png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw input_error("png write failed: " + path);
  }
  int h = img.dim(0), w = img.dim(1);
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float v = std::clamp(img.at(y, x), 0.0f, 1.0f);
      auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0f));
      row[static_cast<size_t>(x) * 2] = static_cast<png_byte>(q >> 8);
      row[static_cast<size_t>(x) * 2 + 1] = static_cast<png_byte>(q & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// 8-bit RGB writer used by the plot renderer.
inline void write_png_rgb8(const std::string& path, int h, int w,
                           const std::vector<unsigned char>& rgb) {
  if (rgb.size() != static_cast<size_t>(h) * w * 3)
    throw input_error("png write: rgb buffer size mismatch");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw input_error("cannot write png: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw input_error("png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw input_error("png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw input_error("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<size_t>(y) * w * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace hand::io
