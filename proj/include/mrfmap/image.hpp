#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mrfmap/error.hpp"

namespace mrfmap {

/// Row-major metric z-depth image; 0 marks an invalid pixel.
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> depth;

  DepthImage() = default;
  DepthImage(int w, int h, double fill = 0.0)
      : width(w), height(h), depth(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {
    if (w < 0 || h < 0) throw Error(ErrorKind::InvalidArgument, "negative image size");
  }

  double& at(int u, int v) { return depth[static_cast<std::size_t>(v) * width + u]; }
  double at(int u, int v) const { return depth[static_cast<std::size_t>(v) * width + u]; }

  static bool is_valid(double d) { return std::isfinite(d) && d > 0.0; }
  bool valid(int u, int v) const { return is_valid(at(u, v)); }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (double d : depth) n += is_valid(d) ? 1 : 0;
    return n;
  }
};

}  // namespace mrfmap
