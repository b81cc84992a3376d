#pragma once

#include <Eigen/Core>

#include <cstddef>

namespace clim {

/// Dense H x W x C raster, row-major with interleaved channels, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  Eigen::ArrayXf pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(Eigen::ArrayXf::Constant(std::size_t(h) * w * c, fill)) {}

  Eigen::Index index(int y, int x, int c) const { return (Eigen::Index(y) * width + x) * channels + c; }
  float& at(int y, int x, int c) { return pixels(index(y, x, c)); }
  float at(int y, int x, int c) const { return pixels(index(y, x, c)); }

  Eigen::Index size() const { return pixels.size(); }
  bool empty() const { return pixels.size() == 0; }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  bool operator==(const Image& o) const {
    return same_shape(o) && (pixels.size() == 0 || (pixels == o.pixels).all());
  }
};

}  // namespace clim
