#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace v2x {

// 8-bit interleaved raster, row-major (row, col, channel).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t col, std::size_t ch) { return data[(r * width + col) * channels + ch]; }
  std::uint8_t at(std::size_t r, std::size_t col, std::size_t ch) const {
    return data[(r * width + col) * channels + ch];
  }

  std::size_t byte_size() const { return data.size(); }

  friend bool operator==(const Image&, const Image&) = default;
};

struct Waypoint {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Waypoint&, const Waypoint&) = default;
};

using Trajectory = std::vector<Waypoint>;

}  // namespace v2x
