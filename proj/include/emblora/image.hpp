#pragma once

#include <filesystem>
#include <vector>

namespace emblora {

/// Interleaved HWC image with channel values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height && channels == o.channels; }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Rec.601 luma of an RGB image, or a copy of a single-channel image.
Image to_gray(const Image& img);

/// Snaps every value to the nearest 8-bit level after clamping to [0, 1].
Image quantize8(const Image& img);

/// Separable Gaussian low-pass with reflected borders; radius = ceil(3 sigma).
Image gaussian_blur(const Image& img, double sigma);

Image read_png(const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);

}  // namespace emblora
