#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace splatfix {

// Row-major interleaved image, values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

  double& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  void clamp01();
};

// 8-bit PNG I/O. Save quantizes with round(clamp(v,0,1)*255); load maps back
// to v/255. Grayscale saves 1-channel images, RGB saves 3-channel.
void save_png(const std::string& path, const Image& img);
Image load_png(const std::string& path);

// Raw float32 depth maps: magic "GFXD", then u32 width, u32 height
// (little-endian), then width*height float32 row-major.
void save_depth(const std::string& path, const Image& depth);
Image load_depth(const std::string& path);

Image gaussian_blur(const Image& img, double sigma);

// Horizontal strip of equally sized images with a 2px white separator.
Image hstack(const std::vector<Image>& imgs);

}  // namespace splatfix
