#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "aclip/common.hpp"

namespace aclip {

// Planar CHW float image, values in [0,1]. 3 channels throughout.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // [3 * height * width]

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), data(static_cast<std::size_t>(3) * h * w, fill) {}

  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  float clamped(int c, int y, int x) const {
    y = std::clamp(y, 0, height - 1);
    x = std::clamp(x, 0, width - 1);
    return at(c, y, x);
  }

  void clamp01() {
    for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
  }
};

// Bilinear sample at continuous pixel coordinates (cell-center convention:
// pixel (y, x) holds the value at coordinate (y + 0.5, x + 0.5)).
inline float sample_bilinear(const Image& img, int c, double y, double x) {
  const double fy = y - 0.5, fx = x - 0.5;
  const int y0 = static_cast<int>(std::floor(fy));
  const int x0 = static_cast<int>(std::floor(fx));
  const double wy = fy - y0, wx = fx - x0;
  const float v00 = img.clamped(c, y0, x0);
  const float v01 = img.clamped(c, y0, x0 + 1);
  const float v10 = img.clamped(c, y0 + 1, x0);
  const float v11 = img.clamped(c, y0 + 1, x0 + 1);
  const double top = v00 + (v01 - v00) * wx;
  const double bot = v10 + (v11 - v10) * wx;
  return static_cast<float>(top + (bot - top) * wy);
}

// Crop the normalized rect out of the source and resize to (oh, ow).
inline Image crop_resize(const Image& src, const CropRect& rect, int oh, int ow) {
  if (!rect.well_formed()) throw GeometryError("crop_resize: malformed rect");
  Image out(oh, ow);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < oh; ++y) {
      const double sy = (rect.y0 + (y + 0.5) / oh * rect.height()) * src.height;
      for (int x = 0; x < ow; ++x) {
        const double sx = (rect.x0 + (x + 0.5) / ow * rect.width()) * src.width;
        out.at(c, y, x) = sample_bilinear(src, c, sy, sx);
      }
    }
  return out;
}

inline Image resize_bilinear(const Image& src, int oh, int ow) {
  return crop_resize(src, CropRect::full(), oh, ow);
}

// Separable Gaussian blur; kernel radius 3*sigma, weights normalized.
inline Image gaussian_blur(const Image& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= norm;

  Image tmp(src.height, src.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * src.clamped(c, y, x + i);
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
  Image out(src.height, src.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * tmp.clamped(c, y + i, x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace aclip
