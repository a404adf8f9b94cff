#include "splatfix/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace splatfix {

void Image::clamp01() {
  for (auto& v : data) v = std::clamp(v, 0.0, 1.0);
}

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

void save_png(const std::string& path, const Image& img) {
  if (img.empty()) throw std::invalid_argument("save_png: empty image");
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("save_png: expected 1 or 3 channels, got " +
                                std::to_string(img.channels));

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("save_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("save_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("save_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("save_png: libpng error writing " + path);
  }

  png_init_io(png, fp.get());
  const int color_type = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, img.width, img.height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
        row[static_cast<size_t>(x) * img.channels + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("load_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("load_png: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("load_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("load_png: libpng error reading " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int ch = static_cast<int>(png_get_channels(png, info));
  if (ch != 1 && ch != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("load_png: unsupported channel count in " + path);
  }

  Image img(w, h, ch);
  std::vector<unsigned char> row(static_cast<size_t>(w) * ch);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c)
        img.at(y, x, c) = row[static_cast<size_t>(x) * ch + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void save_depth(const std::string& path, const Image& depth) {
  if (depth.channels != 1) throw std::invalid_argument("save_depth: expected 1 channel");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("save_depth: cannot open " + path);

  const char magic[4] = {'G', 'F', 'X', 'D'};
  const uint32_t w = static_cast<uint32_t>(depth.width);
  const uint32_t h = static_cast<uint32_t>(depth.height);
  std::fwrite(magic, 1, 4, fp.get());
  std::fwrite(&w, 4, 1, fp.get());
  std::fwrite(&h, 4, 1, fp.get());
  std::vector<float> buf(depth.data.size());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(depth.data[i]);
  if (std::fwrite(buf.data(), 4, buf.size(), fp.get()) != buf.size())
    throw std::runtime_error("save_depth: short write to " + path);
}

Image load_depth(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("load_depth: cannot open " + path);

  char magic[4];
  uint32_t w = 0, h = 0;
  if (std::fread(magic, 1, 4, fp.get()) != 4 || std::memcmp(magic, "GFXD", 4) != 0)
    throw std::runtime_error("load_depth: bad magic in " + path);
  if (std::fread(&w, 4, 1, fp.get()) != 1 || std::fread(&h, 4, 1, fp.get()) != 1)
    throw std::runtime_error("load_depth: truncated header in " + path);

  Image depth(static_cast<int>(w), static_cast<int>(h), 1);
  std::vector<float> buf(depth.data.size());
  if (std::fread(buf.data(), 4, buf.size(), fp.get()) != buf.size())
    throw std::runtime_error("load_depth: truncated payload in " + path);
  for (size_t i = 0; i < buf.size(); ++i) depth.data[i] = buf[i];
  return depth;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;

  // Separable, clamped borders.
  Image tmp(img.width, img.height, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, img.width - 1);
          acc += k[i + radius] * img.at(y, xx, c);
        }
        tmp.at(y, x, c) = acc;
      }
  Image out(img.width, img.height, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, img.height - 1);
          acc += k[i + radius] * tmp.at(yy, x, c);
        }
        out.at(y, x, c) = acc;
      }
  return out;
}

Image hstack(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("hstack: no images");
  const int sep = 2;
  const int h = imgs[0].height;
  const int ch = imgs[0].channels;
  int w = 0;
  for (const auto& im : imgs) {
    if (im.height != h || im.channels != ch)
      throw std::invalid_argument("hstack: mismatched shapes");
    w += im.width;
  }
  w += sep * (static_cast<int>(imgs.size()) - 1);

  Image out(w, h, ch, 1.0);
  int x0 = 0;
  for (const auto& im : imgs) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < im.width; ++x)
        for (int c = 0; c < ch; ++c) out.at(y, x0 + x, c) = im.at(y, x, c);
    x0 += im.width + sep;
  }
  return out;
}

}  // namespace splatfix
