#pragma once

// 8-bit RGB PNG (libpng) and single-channel little-endian PFM.

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "nova/errors.hpp"

namespace nova {

struct RgbImage {
  int width = 0, height = 0;
  std::vector<double> data;  // row-major, 3 channels, [0, 1]
};

struct GrayImage {
  int width = 0, height = 0;
  std::vector<double> data;  // row-major
};

inline std::uint8_t quantize8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// The value an 8-bit PNG round trip returns for v.
inline double quantized8(double v) { return quantize8(v) / 255.0; }

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw FileError(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FileError(path, "libpng initialization failed");
  }
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FileError(path, "PNG write failed");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = quantize8(img.data[y * row.size() + i]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline RgbImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw FileError(path, "cannot open for reading");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FileError(path, "libpng initialization failed");
  }
  RgbImage img;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FileError(path, "not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  row.resize(png_get_rowbytes(png, info));
  img.data.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int i = 0; i < img.width * 3; ++i) img.data[static_cast<std::size_t>(y) * img.width * 3 + i] = row[i] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Greyscale PFM ("Pf"), negative scale = little-endian, rows stored bottom to top.
inline void write_pfm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError(path, "cannot open for writing");
  os << "Pf\n" << img.width << ' ' << img.height << "\n-1.0\n";
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(img.data[static_cast<std::size_t>(y) * img.width + x]));
      for (int b = 0; b < 4; ++b) os.put(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  if (!os) throw FileError(path, "write failed");
}

inline GrayImage read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError(path, "cannot open for reading");
  std::string magic;
  GrayImage img;
  double scale = 0;
  is >> magic >> img.width >> img.height >> scale;
  if (magic != "Pf" || img.width <= 0 || img.height <= 0 || scale >= 0) {
    throw FileError(path, "not a little-endian greyscale PFM");
  }
  is.get();
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  std::vector<unsigned char> raw(n * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FileError(path, "truncated PFM payload");
  }
  img.data.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(raw[4 * k + b]) << (8 * b);
    const std::size_t y = img.height - 1 - k / img.width, x = k % img.width;
    img.data[y * img.width + x] = std::bit_cast<float>(bits);
  }
  return img;
}

}  // namespace nova
