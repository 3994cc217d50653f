#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "capsf/error.hpp"
#include "capsf/tensor.hpp"

namespace capsf {

/// Decoded RGB raster, interleaved, values in [0,1].
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h * 3, fill) {}

  double& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  double at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

namespace detail {

inline RgbImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DataError("cannot decode image " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode image " + path.string() + ": " + msg);
  }
  RgbImage out(img.width, img.height);
  for (std::size_t i = 0; i < buf.size(); ++i) out.pixels[i] = buf[i] / 255.0;
  return out;
}

// Binary PPM (P6) and PGM (P5) with maxval <= 255.
inline RgbImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw DataError("cannot decode image " + path.string() + ": bad PNM header");
  in.get();
  const std::size_t channels = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w * h) * channels);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw DataError("cannot decode image " + path.string() + ": truncated pixel data");
  RgbImage out(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
  for (std::size_t p = 0; p < out.width * out.height; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      out.pixels[p * 3 + c] = buf[p * channels + (channels == 3 ? c : 0)] / static_cast<double>(maxval);
  return out;
}

}  // namespace detail

/// Decodes PNG (any bit depth/colour type, converted to 8-bit RGB) or binary
/// PPM/PGM.
inline RgbImage read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::array<unsigned char, 8> head{};
  in.read(reinterpret_cast<char*>(head.data()), 8);
  const auto got = static_cast<std::size_t>(in.gcount());
  in.close();
  static constexpr std::array<unsigned char, 8> kPng{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (got == 8 && head == kPng) return detail::read_png(path);
  if (got >= 2 && head[0] == 'P' && (head[1] == '6' || head[1] == '5')) return detail::read_pnm(path);
  throw DataError("cannot decode image " + path.string() + ": unsupported format");
}

/// Writes 8-bit RGB PNG. Values are clamped to [0,1] and rounded.
inline void write_png(const std::filesystem::path& path, const RgbImage& image) {
  std::vector<std::uint8_t> buf(image.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("cannot write image " + path.string() + ": " + img.message);
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
inline RgbImage resize_bilinear(const RgbImage& src, std::size_t width, std::size_t height) {
  if (src.width == 0 || src.height == 0) throw DataError("cannot resize an empty image");
  if (src.width == width && src.height == height) return src;
  RgbImage out(width, height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(width);
  const double sy = static_cast<double>(src.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src.at(x0, y0, c) + wx * (src.at(x1, y0, c) - src.at(x0, y0, c));
        const double bottom = src.at(x0, y1, c) + wx * (src.at(x1, y1, c) - src.at(x0, y1, c));
        out.at(x, y, c) = top + wy * (bottom - top);
      }
    }
  }
  return out;
}

/// Resize to size x size, then normalize each channel as (x - mean) / std.
/// Returns a channel-first [3,size,size] tensor.
template <typename T>
Tensor<T> preprocess(const RgbImage& image, const std::array<double, 3>& mean, const std::array<double, 3>& std,
                     std::size_t size = 128) {
  if (image.width == 0 || image.height == 0) throw DataError("cannot preprocess an empty image");
  for (double s : std)
    if (!(s > 0)) throw UsageError("normalization std must be positive");
  const RgbImage scaled = resize_bilinear(image, size, size);
  std::vector<T> data(3 * size * size);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        data[(c * size + y) * size + x] = static_cast<T>((scaled.at(x, y, c) - mean[c]) / std[c]);
  return Tensor<T>({3, size, size}, std::move(data));
}

}  // namespace capsf
