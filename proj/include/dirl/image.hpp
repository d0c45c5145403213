#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "dirl/cell_prior.hpp"
#include "dirl/tensor.hpp"

namespace dirl {

// Images are H x W x 3 tensors with values in [0, 1].

inline std::size_t image_height(const Tensor& img) { return img.dim(0); }
inline std::size_t image_width(const Tensor& img) { return img.dim(1); }

inline void require_image(const Tensor& img) {
  if (img.rank() != 3 || img.dim(2) != 3) throw DimensionError("expected an HxWx3 image, got " + shape_str(img.shape()));
}

inline Tensor crop_image(const Tensor& img, const CropRect& r) {
  require_image(img);
  if (r.width <= 0 || r.height <= 0 || r.x < 0 || r.y < 0 ||
      static_cast<std::size_t>(r.x + r.width) > image_width(img) ||
      static_cast<std::size_t>(r.y + r.height) > image_height(img)) {
    throw ConfigError("crop rectangle outside image " + shape_str(img.shape()));
  }
  Tensor out({static_cast<std::size_t>(r.height), static_cast<std::size_t>(r.width), 3});
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out(y, x, c) = img(r.y + y, r.x + x, c);
  return out;
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
inline Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  require_image(img);
  const std::size_t in_h = image_height(img);
  const std::size_t in_w = image_width(img);
  if (in_h == out_h && in_w == out_w) return img;
  Tensor out({out_h, out_w, 3});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
    const std::size_t y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
      const std::size_t x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img(y0, x0, c) * (1.0 - wx) + img(y0, x1, c) * wx;
        const double bot = img(y1, x0, c) * (1.0 - wx) + img(y1, x1, c) * wx;
        out(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

inline Tensor flip_horizontal(const Tensor& img) {
  require_image(img);
  const std::size_t h = image_height(img);
  const std::size_t w = image_width(img);
  Tensor out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out(y, x, c) = img(y, w - 1 - x, c);
  return out;
}

inline Tensor apply_geometry(const Tensor& img, const Geometry& geo) {
  Tensor out = resize_bilinear(crop_image(img, geo.crop), static_cast<std::size_t>(geo.out_h),
                               static_cast<std::size_t>(geo.out_w));
  return geo.flip_h ? flip_horizontal(out) : out;
}

/// Brightness scaling followed by contrast scaling about the image mean, clamped to [0, 1].
inline Tensor jitter_photometric(const Tensor& img, double brightness, double contrast) {
  Tensor out = img;
  double mean = 0.0;
  for (double& v : out.storage()) {
    v *= brightness;
    mean += v;
  }
  mean /= static_cast<double>(out.size());
  for (double& v : out.storage()) v = std::clamp((v - mean) * contrast + mean, 0.0, 1.0);
  return out;
}

inline Tensor to_grayscale(const Tensor& img) {
  require_image(img);
  Tensor out({image_height(img), image_width(img)});
  for (std::size_t y = 0; y < image_height(img); ++y)
    for (std::size_t x = 0; x < image_width(img); ++x)
      out(y, x) = 0.299 * img(y, x, 0) + 0.587 * img(y, x, 1) + 0.114 * img(y, x, 2);
  return out;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Tensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  Tensor out({image.height, image.width, 3});
  for (std::size_t i = 0; i < buffer.size(); ++i) out[i] = buffer[i] / 255.0;
  return out;
}

inline void write_png(const std::filesystem::path& path, const Tensor& img) {
  require_image(img);
  std::vector<png_byte> buffer(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) buffer[i] = to_byte(img[i]);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(image_width(img));
  image.height = static_cast<png_uint_32>(image_height(img));
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

/// Flattens p x p patches (row-major patch order, pixel order y, x, channel) into rows.
inline Tensor patchify(const Tensor& img, std::size_t p) {
  require_image(img);
  const std::size_t h = image_height(img);
  const std::size_t w = image_width(img);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ConfigError("image " + shape_str(img.shape()) + " is not divisible by patch size " + std::to_string(p));
  }
  const std::size_t gw = w / p;
  const std::size_t n = (h / p) * gw;
  Tensor out({n, p * p * 3});
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t py = (t / gw) * p;
    const std::size_t px = (t % gw) * p;
    std::size_t k = 0;
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x)
        for (std::size_t c = 0; c < 3; ++c) out(t, k++) = img(py + y, px + x, c);
  }
  return out;
}

}  // namespace dirl
