#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "hand/core/tensor.hpp"

namespace hand {

// Rank-2 tensors are used as grayscale images: dim(0) = rows, dim(1) = cols.

inline Tensor clamp01(Tensor img) {
  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = std::clamp(img[i], 0.0f, 1.0f);
  return img;
}

// Bilinear sample with edge clamping; (r, c) in pixel coordinates.
inline float sample_bilinear(const Tensor& img, float r, float c) {
  int h = img.dim(0), w = img.dim(1);
  r = std::clamp(r, 0.0f, static_cast<float>(h - 1));
  c = std::clamp(c, 0.0f, static_cast<float>(w - 1));
  int r0 = static_cast<int>(r), c0 = static_cast<int>(c);
  int r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
  float fr = r - static_cast<float>(r0), fc = c - static_cast<float>(c0);
  float top = img.at(r0, c0) * (1.0f - fc) + img.at(r0, c1) * fc;
  float bot = img.at(r1, c0) * (1.0f - fc) + img.at(r1, c1) * fc;
  return top * (1.0f - fr) + bot * fr;
}

// Bilinear resize with half-pixel centers (align_corners = false).
inline Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
  if (img.rank() != 2 || img.empty()) throw input_error("resize: empty or non-2d image");
  if (out_h <= 0 || out_w <= 0) throw input_error("resize: non-positive target size");
  if (img.dim(0) == out_h && img.dim(1) == out_w) return img;
  Tensor out({out_h, out_w});
  float sr = static_cast<float>(img.dim(0)) / static_cast<float>(out_h);
  float sc = static_cast<float>(img.dim(1)) / static_cast<float>(out_w);
  for (int i = 0; i < out_h; ++i) {
    float r = (static_cast<float>(i) + 0.5f) * sr - 0.5f;
    for (int j = 0; j < out_w; ++j) {
      float c = (static_cast<float>(j) + 0.5f) * sc - 0.5f;
      out.at(i, j) = sample_bilinear(img, r, c);
    }
  }
  return out;
}

// Median filter with odd kernel and reflected borders.
inline Tensor median_filter(const Tensor& img, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw input_error("median filter: kernel must be odd");
  int h = img.dim(0), w = img.dim(1), half = kernel / 2;
  Tensor out({h, w});
  std::vector<float> window(static_cast<size_t>(kernel) * kernel);
  auto reflect = [](int v, int n) {
    if (v < 0) v = -v - 1;
    if (v >= n) v = 2 * n - v - 1;
    return std::clamp(v, 0, n - 1);
  };
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      size_t m = 0;
      for (int di = -half; di <= half; ++di)
        for (int dj = -half; dj <= half; ++dj)
          window[m++] = img.at(reflect(i + di, h), reflect(j + dj, w));
      auto mid = window.begin() + static_cast<std::ptrdiff_t>(m / 2);
      std::nth_element(window.begin(), mid, window.begin() + static_cast<std::ptrdiff_t>(m));
      out.at(i, j) = *mid;
    }
  }
  return out;
}

// Horizontal concatenation: [left | right], equal heights required.
inline Tensor hconcat(const Tensor& left, const Tensor& right) {
  if (left.dim(0) != right.dim(0)) throw input_error("hconcat: height mismatch");
  int h = left.dim(0), wl = left.dim(1), wr = right.dim(1);
  Tensor out({h, wl + wr});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < wl; ++j) out.at(i, j) = left.at(i, j);
    for (int j = 0; j < wr; ++j) out.at(i, wl + j) = right.at(i, j);
  }
  return out;
}

inline Tensor crop(const Tensor& img, int r0, int c0, int rows, int cols) {
  if (r0 < 0 || c0 < 0 || rows <= 0 || cols <= 0 || r0 + rows > img.dim(0) ||
      c0 + cols > img.dim(1))
    throw input_error("crop: window out of bounds");
  Tensor out({rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out.at(i, j) = img.at(r0 + i, c0 + j);
  return out;
}

}  // namespace hand
