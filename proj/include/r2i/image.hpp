#pragma once

// 8-bit RGB PNG <-> [H,W,3] tensors in [-1,1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r2i/tensor.hpp"

namespace r2i {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp((double(v) + 1.0) * 127.5, 0.0, 255.0)));
}

inline float from_byte(std::uint8_t b) { return static_cast<float>(b / 127.5 - 1.0); }

inline std::vector<std::uint8_t> encode_png(const Tensor& img) {
  if (img.rank() != 3 || img.dim(2) != 3) throw ShapeError("encode_png: expected [H,W,3], got " + shape_string(img.shape()));
  std::vector<std::uint8_t> rgb(img.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = to_byte(img[i]);
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.dim(1));
  im.height = static_cast<png_uint_32>(img.dim(0));
  im.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&im, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode failed: ") + im.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&im, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode failed: ") + im.message);
  }
  out.resize(size);
  return out;
}

inline Tensor decode_png(const std::vector<std::uint8_t>& bytes, const std::string& what = "image") {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&im, bytes.data(), bytes.size())) {
    throw ImageError(what + ": not a decodable PNG (" + im.message + ")");
  }
  im.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&im);
    throw ImageError(what + ": PNG decode failed (" + im.message + ")");
  }
  Tensor t({static_cast<std::int64_t>(im.height), static_cast<std::int64_t>(im.width), 3});
  for (std::size_t i = 0; i < rgb.size(); ++i) t[i] = from_byte(rgb[i]);
  return t;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ImageError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Tensor read_png(const std::filesystem::path& p) { return decode_png(read_file_bytes(p), p.string()); }

inline void write_png(const std::filesystem::path& p, const Tensor& img) {
  const auto bytes = encode_png(img);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("cannot write " + p.string());
}

/// Width and height from the PNG header, without decoding pixels.
inline std::pair<std::int64_t, std::int64_t> png_size(const std::filesystem::path& p) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  const auto bytes = read_file_bytes(p);
  if (!png_image_begin_read_from_memory(&im, bytes.data(), bytes.size())) {
    throw ImageError(p.string() + ": not a decodable PNG (" + im.message + ")");
  }
  png_image_free(&im);
  return {static_cast<std::int64_t>(im.width), static_cast<std::int64_t>(im.height)};
}

/// Mirror along the width axis.
inline Tensor flip_horizontal(const Tensor& img) {
  const std::int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor out(img.shape());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t k = 0; k < c; ++k) out[(y * w + x) * c + k] = img[(y * w + (w - 1 - x)) * c + k];
  return out;
}

}  // namespace r2i
