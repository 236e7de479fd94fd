#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "vlmaudit/core.hpp"
#include "vlmaudit/fileio.hpp"

namespace vlmaudit {

/// Row-major raster with `channels` interleaved samples per pixel.
template <typename T, int Channels>
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(int w, int h, T fill = T{})
      : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * Channels, fill) {}

  static constexpr int channels = Channels;

  std::size_t index(int x, int y) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * Channels;
  }
  T& at(int x, int y, int c = 0) { return data[index(x, y) + static_cast<std::size_t>(c)]; }
  const T& at(int x, int y, int c = 0) const { return data[index(x, y) + static_cast<std::size_t>(c)]; }

  bool operator==(const Raster&) const = default;
};

using RgbImage = Raster<std::uint8_t, 3>;
using GrayImage = Raster<std::uint8_t, 1>;
using RealImage = Raster<double, 1>;

struct ImageSize {
  int width = 0;
  int height = 0;
  bool operator==(const ImageSize&) const = default;
};

/// Decodes PNG or JPEG bytes into RGB.
inline RgbImage decode_image(const std::string& bytes) {
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<char*>(bytes.data()));
  cv::Mat bgr = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(ErrorKind::InvalidArgument, "undecodable image");
  RgbImage out(bgr.cols, bgr.rows);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      out.at(x, y, 0) = row[x][2];
      out.at(x, y, 1) = row[x][1];
      out.at(x, y, 2) = row[x][0];
    }
  }
  return out;
}

inline RgbImage read_image(const std::filesystem::path& path) { return decode_image(read_file(path)); }

inline std::string encode_png(const GrayImage& img) {
  cv::Mat m(img.height, img.width, CV_8UC1, const_cast<std::uint8_t*>(img.data.data()));
  std::vector<uchar> out;
  if (!cv::imencode(".png", m, out)) throw Error(ErrorKind::Io, "png encode failed");
  return {out.begin(), out.end()};
}

inline std::string encode_png(const RgbImage& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width; ++x) row[x] = cv::Vec3b(img.at(x, y, 2), img.at(x, y, 1), img.at(x, y, 0));
  }
  std::vector<uchar> out;
  if (!cv::imencode(".png", m, out)) throw Error(ErrorKind::Io, "png encode failed");
  return {out.begin(), out.end()};
}

inline GrayImage decode_gray(const std::string& bytes) {
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<char*>(bytes.data()));
  cv::Mat g = cv::imdecode(buf, cv::IMREAD_GRAYSCALE);
  if (g.empty()) throw Error(ErrorKind::InvalidArgument, "undecodable image");
  GrayImage out(g.cols, g.rows);
  for (int y = 0; y < g.rows; ++y)
    for (int x = 0; x < g.cols; ++x) out.at(x, y) = g.at<uchar>(y, x);
  return out;
}

inline std::string image_mime(const std::string& bytes) {
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF && static_cast<unsigned char>(bytes[1]) == 0xD8)
    return "image/jpeg";
  return "image/png";
}

}  // namespace vlmaudit
