#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace skelsplat {

/// Dense float image, row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

/// Quantizes [0,1] values to 8 bits (round half up, clamped).
std::uint8_t to_byte(double v);

/// Encodes an RGB (3-channel) or RGBA (4-channel) image as PNG bytes.
/// A 1-channel image is written as grayscale.
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Little-endian float32 PFM ("PF" color / "Pf" grayscale), bottom-to-top rows.
void write_pfm(const std::filesystem::path& path, const Image& image);
Image read_pfm(const std::filesystem::path& path);

/// Peak signal-to-noise ratio for [0,1] images.
double psnr(const Image& a, const Image& b);

/// Stacks an RGB image with an alpha image into RGBA.
Image with_alpha(const Image& rgb, const Image& alpha);

}  // namespace skelsplat
