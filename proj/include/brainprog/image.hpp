#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace brainprog::image {

/// Single-channel real-valued raster, row-major, nominal range [0, 1].
class ImageGrid {
 public:
  ImageGrid() = default;
  ImageGrid(int width, int height, double fill = 0.0);
  ImageGrid(int width, int height, std::vector<double> values);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& at(int x, int y) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  /// Border-replicated read.
  double clamped(int x, int y) const;

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  bool same_shape(const ImageGrid& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_;
  }

  friend bool operator==(const ImageGrid&, const ImageGrid&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> values_;
};

struct RgbImage {
  ImageGrid r, g, b;

  RgbImage() = default;
  RgbImage(ImageGrid r, ImageGrid g, ImageGrid b);

  int width() const noexcept { return r.width(); }
  int height() const noexcept { return r.height(); }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

enum class Channel { R, G, B, C, M, Y, K, H, S, V };
inline constexpr int kChannelCount = 10;

const char* channel_name(Channel c) noexcept;

/// The ten color planes of an image (RGB, CMYK, HSV), each in [0, 1].
struct ColorDecomposition {
  ImageGrid planes[kChannelCount];

  const ImageGrid& operator[](Channel c) const { return planes[static_cast<int>(c)]; }
  ImageGrid& operator[](Channel c) { return planes[static_cast<int>(c)]; }
  int width() const noexcept { return planes[0].width(); }
  int height() const noexcept { return planes[0].height(); }
};

/// Bicubic (Keys, a = -0.5) resampling with border replication; output clamped to [0, 1].
ImageGrid resize(const ImageGrid& img, int width, int height);
/// Same kernel without the final clamp.
ImageGrid resize_unclamped(const ImageGrid& img, int width, int height);
RgbImage resize(const RgbImage& img, int width, int height);

/// Cubic convolution kernel used by resize.
double cubic_weight(double t) noexcept;

ColorDecomposition decompose_colors(const RgbImage& img);

struct Rgb {
  double r, g, b;
};
struct Hsv {
  double h, s, v;
};
Hsv rgb_to_hsv(double r, double g, double b) noexcept;
Rgb hsv_to_rgb(double h, double s, double v) noexcept;

/// Normalized 1-D Gaussian taps, radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);
/// Separable Gaussian convolution with replicated borders; no clamping.
ImageGrid gaussian_blur(const ImageGrid& img, double sigma);

/// 2x2 box mean; output size (floor(w/2), floor(h/2)).
ImageGrid downsample_half(const ImageGrid& img);

/// Affine rescale to [0, 1]; (near-)constant maps become all zeros.
ImageGrid normalize_minmax(const ImageGrid& img);
void normalize_minmax_inplace(ImageGrid& img);

double mean(const ImageGrid& img);

}  // namespace brainprog::image
