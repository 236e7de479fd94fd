#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "vlmaudit/core.hpp"
#include "vlmaudit/image.hpp"

namespace vlmaudit {

/// Canny configuration. Thresholds are in L1 gradient-magnitude units
/// (|gx| + |gy| of 3x3 Sobel on 8-bit data, so at most 1020 per axis pair).
struct CannyParams {
  double sigma = 1.4;
  int kernel_radius = 5;
  double low_threshold = 100.0;
  double high_threshold = 200.0;

  bool operator==(const CannyParams&) const = default;
};

inline void validate(const CannyParams& p) {
  if (!(p.sigma > 0.0)) throw Error(ErrorKind::InvalidParams, "sigma must be positive");
  if (p.kernel_radius < static_cast<int>(std::ceil(3.0 * p.sigma)))
    throw Error(ErrorKind::InvalidParams, "kernel_radius " + std::to_string(p.kernel_radius) + " < ceil(3 sigma)");
  if (!(p.low_threshold > 0.0 && p.low_threshold < p.high_threshold && p.high_threshold <= 1020.0))
    throw Error(ErrorKind::InvalidParams, "thresholds must satisfy 0 < low < high <= 1020");
}

struct EdgeMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // 0 or 255
  CannyParams params;

  GrayImage as_image() const {
    GrayImage g(width, height);
    g.data = data;
    return g;
  }
  std::size_t edge_count() const {
    std::size_t n = 0;
    for (auto v : data) n += v ? 1 : 0;
    return n;
  }
  bool operator==(const EdgeMap&) const = default;
};

inline GrayImage to_grayscale(const RgbImage& rgb) {
  if (rgb.width <= 0 || rgb.height <= 0) throw Error(ErrorKind::ZeroDimension, "empty raster");
  GrayImage out(rgb.width, rgb.height);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x) {
      double l = 0.299 * rgb.at(x, y, 0) + 0.587 * rgb.at(x, y, 1) + 0.114 * rgb.at(x, y, 2);
      out.at(x, y) = static_cast<std::uint8_t>(std::lround(l));
    }
  return out;
}

inline RealImage to_real(const GrayImage& g) {
  RealImage r(g.width, g.height);
  for (std::size_t i = 0; i < g.data.size(); ++i) r.data[i] = g.data[i];
  return r;
}

/// Normalized 1-D Gaussian, taps -radius..radius.
inline std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& w : k) w /= sum;
  return k;
}

namespace detail {
inline int clamp_index(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

// Blur output lives on a 2^-20 grid: at that resolution every later Sobel
// sum is exact in double, so gradient values do not depend on summation order.
inline constexpr double kBlurGrid = 1048576.0;
inline double quantize(double v) { return std::round(v * kBlurGrid) / kBlurGrid; }
}  // namespace detail

/// Separable Gaussian blur with edge-clamp borders.
inline RealImage gaussian_blur(const RealImage& img, const CannyParams& params) {
  validate(params);
  auto k = gaussian_kernel(params.sigma, params.kernel_radius);
  const int r = params.kernel_radius;
  RealImage tmp(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * img.at(detail::clamp_index(x + i, img.width), y);
      tmp.at(x, y) = acc;
    }
  RealImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.at(x, detail::clamp_index(y + i, img.height));
      out.at(x, y) = detail::quantize(acc);
    }
  return out;
}

inline RealImage gaussian_blur(const GrayImage& img, const CannyParams& params) {
  return gaussian_blur(to_real(img), params);
}

/// Quantized gradient direction in degrees.
enum class Direction : std::uint8_t { Deg0 = 0, Deg45 = 1, Deg90 = 2, Deg135 = 3 };

inline int degrees(Direction d) { return 45 * static_cast<int>(d); }

struct Gradients {
  RealImage magnitude;
  Raster<Direction, 1> direction;
};

inline Direction quantize_direction(double gx, double gy) {
  double a = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
  if (a < 0.0) a += 180.0;
  if (a < 22.5 || a >= 157.5) return Direction::Deg0;
  if (a < 67.5) return Direction::Deg45;
  if (a < 112.5) return Direction::Deg90;
  return Direction::Deg135;
}

/// 3x3 Sobel (y axis pointing down), L1 magnitude, edge-clamp borders.
inline Gradients sobel_gradients(const RealImage& img) {
  if (img.width < 3 || img.height < 3) throw Error(ErrorKind::TooSmall, "sobel needs at least 3x3");
  Gradients g{RealImage(img.width, img.height), Raster<Direction, 1>(img.width, img.height)};
  auto px = [&](int x, int y) {
    return img.at(detail::clamp_index(x, img.width), detail::clamp_index(y, img.height));
  };
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1)) -
                  (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
      double gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1)) -
                  (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
      g.magnitude.at(x, y) = std::abs(gx) + std::abs(gy);
      g.direction.at(x, y) = quantize_direction(gx, gy);
    }
  return g;
}

inline Gradients sobel_gradients(const GrayImage& img) { return sobel_gradients(to_real(img)); }

/// Keeps a pixel iff its magnitude is positive, strictly above the neighbour
/// behind it along the gradient and not below the one ahead. The asymmetric
/// tie rule turns a two-pixel plateau into a single pixel.
/// Out-of-range neighbours count as zero magnitude.
inline RealImage non_maximum_suppression(const Gradients& g) {
  static constexpr std::array<std::array<int, 2>, 4> kStep{{{1, 0}, {1, 1}, {0, 1}, {-1, 1}}};
  const auto& m = g.magnitude;
  RealImage out(m.width, m.height, 0.0);
  auto mag = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= m.width || y >= m.height) return 0.0;
    return m.at(x, y);
  };
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      double v = m.at(x, y);
      if (v <= 0.0) continue;
      const auto& s = kStep[static_cast<std::size_t>(g.direction.at(x, y))];
      if (v > mag(x - s[0], y - s[1]) && v >= mag(x + s[0], y + s[1])) out.at(x, y) = v;
    }
  return out;
}

/// Double threshold: strong (>= high) pixels seed a flood through 8-connected
/// weak (>= low) pixels.
inline std::vector<std::uint8_t> hysteresis(const RealImage& thin, double low, double high) {
  const int w = thin.width, h = thin.height;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0);
  std::deque<std::pair<int, int>> frontier;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (thin.at(x, y) >= high) {
        out[thin.index(x, y)] = 255;
        frontier.emplace_back(x, y);
      }
  while (!frontier.empty()) {
    auto [cx, cy] = frontier.front();
    frontier.pop_front();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        int nx = cx + dx, ny = cy + dy;
        if ((dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        auto idx = thin.index(nx, ny);
        if (out[idx] == 0 && thin.data[idx] >= low) {
          out[idx] = 255;
          frontier.emplace_back(nx, ny);
        }
      }
  }
  return out;
}

inline EdgeMap canny(const GrayImage& img, const CannyParams& params) {
  validate(params);
  if (img.width <= 0 || img.height <= 0) throw Error(ErrorKind::ZeroDimension, "empty raster");
  auto blurred = gaussian_blur(img, params);
  auto grads = sobel_gradients(blurred);
  auto thin = non_maximum_suppression(grads);
  return {img.width, img.height, hysteresis(thin, params.low_threshold, params.high_threshold), params};
}

inline EdgeMap canny(const RgbImage& img, const CannyParams& params) { return canny(to_grayscale(img), params); }

inline std::string encode_png(const EdgeMap& e) { return encode_png(e.as_image()); }

}  // namespace vlmaudit
