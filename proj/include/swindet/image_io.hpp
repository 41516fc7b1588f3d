#pragma once

// 8-bit RGB PNG reading/writing (via libpng) and conversion between byte
// images and planar [3,H,W] float tensors in [0,1].

#include <png.h>

#include <cstdio>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "swindet/tensor.hpp"

namespace swindet {

struct ImageU8 {
  std::int64_t width = 0, height = 0;
  std::vector<unsigned char> rgb;  // row-major, 3 bytes per pixel

  unsigned char& at(std::int64_t row, std::int64_t col, int ch) {
    return rgb[static_cast<std::size_t>((row * width + col) * 3 + ch)];
  }
  unsigned char at(std::int64_t row, std::int64_t col, int ch) const {
    return rgb[static_cast<std::size_t>((row * width + col) * 3 + ch)];
  }

  bool operator==(const ImageU8& o) const {
    return width == o.width && height == o.height && rgb == o.rgb;
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_png(const std::string& path, const ImageU8& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.rgb.size() != static_cast<std::size_t>(img.width * img.height * 3))
    throw usage_error("write_png: inconsistent image buffer for " + path);

  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw io_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw io_error("write_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw io_error("write_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("write_png: encode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (std::int64_t r = 0; r < img.height; ++r)
    rows[static_cast<std::size_t>(r)] =
        const_cast<png_bytep>(img.rgb.data() + r * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline ImageU8 read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw io_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw io_error("read_png: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw io_error("read_png: png_create_info_struct failed");
  }
  ImageU8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("read_png: decode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  // Normalize every source layout to 8-bit RGB.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  img.width = static_cast<std::int64_t>(png_get_image_width(png, info));
  img.height = static_cast<std::int64_t>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(img.width * 3)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("read_png: unexpected row size in " + path);
  }
  img.rgb.resize(static_cast<std::size_t>(img.width * img.height * 3));
  rows.resize(static_cast<std::size_t>(img.height));
  for (std::int64_t r = 0; r < img.height; ++r)
    rows[static_cast<std::size_t>(r)] = img.rgb.data() + r * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// [3,H,W] in [0,1], planar channel order.
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  const std::int64_t H = img.height, W = img.width;
  std::vector<T> v(static_cast<std::size_t>(3 * H * W));
  for (int ch = 0; ch < 3; ++ch)
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c)
        v[static_cast<std::size_t>((ch * H + r) * W + c)] =
            static_cast<T>(img.at(r, c, ch)) / T(255);
  return Tensor<T>::from_data({3, H, W}, std::move(v));
}

template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 3)
    throw shape_error("tensor_to_image: expected [3,H,W], got " + shape_str(t.shape()));
  const std::int64_t H = t.dim(1), W = t.dim(2);
  ImageU8 img;
  img.width = W;
  img.height = H;
  img.rgb.resize(static_cast<std::size_t>(3 * H * W));
  const auto& v = t.value();
  for (int ch = 0; ch < 3; ++ch)
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c) {
        const T x = v[static_cast<std::size_t>((ch * H + r) * W + c)];
        const T clamped = std::min(T(1), std::max(T(0), x));
        img.at(r, c, ch) = static_cast<unsigned char>(std::lround(clamped * T(255)));
      }
  return img;
}

}  // namespace swindet
