#include "brainprog/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "brainprog/error.hpp"

namespace brainprog::image {

ImageGrid::ImageGrid(int width, int height, double fill)
    : width_(width), height_(height) {
  if (width < 1 || height < 1) throw Error("ImageGrid: dimensions must be positive");
  values_.assign(static_cast<std::size_t>(width) * height, fill);
}

ImageGrid::ImageGrid(int width, int height, std::vector<double> values)
    : width_(width), height_(height), values_(std::move(values)) {
  if (width < 1 || height < 1) throw Error("ImageGrid: dimensions must be positive");
  if (values_.size() != static_cast<std::size_t>(width) * height) {
    throw Error("ImageGrid: value count does not match width x height");
  }
}

double ImageGrid::clamped(int x, int y) const {
  x = std::clamp(x, 0, width_ - 1);
  y = std::clamp(y, 0, height_ - 1);
  return at(x, y);
}

RgbImage::RgbImage(ImageGrid r_, ImageGrid g_, ImageGrid b_)
    : r(std::move(r_)), g(std::move(g_)), b(std::move(b_)) {
  if (!r.same_shape(g) || !r.same_shape(b)) throw Error("RgbImage: channel dimensions differ");
}

const char* channel_name(Channel c) noexcept {
  static constexpr const char* names[kChannelCount] = {"r", "g", "b", "c", "m", "y", "k", "h", "s", "v"};
  return names[static_cast<int>(c)];
}

double cubic_weight(double t) noexcept {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace {

struct Taps {
  int index[4];
  double weight[4];
};

std::vector<Taps> cubic_taps(int in_size, int out_size) {
  std::vector<Taps> taps(static_cast<std::size_t>(out_size));
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    const double src = (o + 0.5) * scale - 0.5;
    const double base = std::floor(src);
    const double t = src - base;
    auto& tp = taps[static_cast<std::size_t>(o)];
    for (int k = 0; k < 4; ++k) {
      tp.index[k] = std::clamp(static_cast<int>(base) - 1 + k, 0, in_size - 1);
      tp.weight[k] = cubic_weight(t - (k - 1));
    }
  }
  return taps;
}

}  // namespace

ImageGrid resize_unclamped(const ImageGrid& img, int width, int height) {
  if (width < 1 || height < 1) throw Error("resize: target dimensions must be positive");
  if (img.width() == width && img.height() == height) return img;

  const auto xt = cubic_taps(img.width(), width);
  const auto yt = cubic_taps(img.height(), height);

  ImageGrid rows(width, img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < width; ++x) {
      const auto& tp = xt[static_cast<std::size_t>(x)];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += tp.weight[k] * img.at(tp.index[k], y);
      rows.at(x, y) = acc;
    }
  }
  ImageGrid out(width, height, 0.0);
  for (int y = 0; y < height; ++y) {
    const auto& tp = yt[static_cast<std::size_t>(y)];
    double* dst = &out.values()[static_cast<std::size_t>(y) * width];
    for (int k = 0; k < 4; ++k) {
      const double wk = tp.weight[k];
      const double* src = &rows.values()[static_cast<std::size_t>(tp.index[k]) * width];
      for (int x = 0; x < width; ++x) dst[x] += wk * src[x];
    }
  }
  return out;
}

ImageGrid resize(const ImageGrid& img, int width, int height) {
  ImageGrid out = resize_unclamped(img, width, height);
  for (auto& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

RgbImage resize(const RgbImage& img, int width, int height) {
  return RgbImage(resize(img.r, width, height), resize(img.g, width, height), resize(img.b, width, height));
}

Hsv rgb_to_hsv(double r, double g, double b) noexcept {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  Hsv out{0.0, 0.0, mx};
  if (mx > 0.0) out.s = delta / mx;
  if (delta > 0.0) {
    double h;
    if (mx == r) {
      h = (g - b) / delta;
      if (h < 0.0) h += 6.0;
    } else if (mx == g) {
      h = (b - r) / delta + 2.0;
    } else {
      h = (r - g) / delta + 4.0;
    }
    out.h = h / 6.0;
    if (out.h >= 1.0) out.h -= 1.0;
  }
  return out;
}

Rgb hsv_to_rgb(double h, double s, double v) noexcept {
  const double hh = h * 6.0;
  const double sector = std::floor(hh);
  const double f = hh - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (static_cast<int>(sector) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

ColorDecomposition decompose_colors(const RgbImage& img) {
  const int w = img.width();
  const int h = img.height();
  ColorDecomposition dec;
  dec[Channel::R] = img.r;
  dec[Channel::G] = img.g;
  dec[Channel::B] = img.b;
  for (int c = 3; c < kChannelCount; ++c) dec.planes[c] = ImageGrid(w, h);

  for (std::size_t i = 0; i < img.r.size(); ++i) {
    const double r = img.r[i], g = img.g[i], b = img.b[i];
    const double k = 1.0 - std::max({r, g, b});
    if (k < 1.0) {
      dec[Channel::C][i] = (1.0 - r - k) / (1.0 - k);
      dec[Channel::M][i] = (1.0 - g - k) / (1.0 - k);
      dec[Channel::Y][i] = (1.0 - b - k) / (1.0 - k);
    }
    dec[Channel::K][i] = k;
    const Hsv hsv = rgb_to_hsv(r, g, b);
    dec[Channel::H][i] = hsv.h;
    dec[Channel::S][i] = hsv.s;
    dec[Channel::V][i] = hsv.v;
  }
  return dec;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw Error("gaussian_kernel: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  }
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= sum;
  return k;
}

ImageGrid gaussian_blur(const ImageGrid& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int w = img.width();
  const int h = img.height();

  // Horizontal pass over a border-replicated copy of each row.
  ImageGrid tmp(w, h);
  std::vector<double> row(static_cast<std::size_t>(w + 2 * radius));
  for (int y = 0; y < h; ++y) {
    const double* src = &img.values()[static_cast<std::size_t>(y) * w];
    for (int x = -radius; x < w + radius; ++x) row[static_cast<std::size_t>(x + radius)] = src[std::clamp(x, 0, w - 1)];
    double* dst = &tmp.values()[static_cast<std::size_t>(y) * w];
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = 0; i <= 2 * radius; ++i) acc += k[static_cast<std::size_t>(i)] * row[static_cast<std::size_t>(x + i)];
      dst[x] = acc;
    }
  }
  // Vertical pass, accumulated row by row in the same tap order.
  ImageGrid out(w, h, 0.0);
  for (int y = 0; y < h; ++y) {
    double* dst = &out.values()[static_cast<std::size_t>(y) * w];
    for (int i = -radius; i <= radius; ++i) {
      const double kv = k[static_cast<std::size_t>(i + radius)];
      const double* src = &tmp.values()[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w];
      for (int x = 0; x < w; ++x) dst[x] += kv * src[x];
    }
  }
  return out;
}

ImageGrid downsample_half(const ImageGrid& img) {
  if (img.width() < 2 || img.height() < 2) {
    throw Error("downsample_half: degenerate size " + std::to_string(img.width()) + "x" +
                std::to_string(img.height()));
  }
  const int w = img.width() / 2;
  const int h = img.height() / 2;
  ImageGrid out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out.at(x, y) = 0.25 * (img.at(2 * x, 2 * y) + img.at(2 * x + 1, 2 * y) + img.at(2 * x, 2 * y + 1) +
                             img.at(2 * x + 1, 2 * y + 1));
    }
  }
  return out;
}

void normalize_minmax_inplace(ImageGrid& img) {
  auto& v = img.values();
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  const double range = hi - lo;
  // Treat round-off-level ranges as constant maps.
  if (!(range > 1e-9 * std::max({1.0, std::abs(lo), std::abs(hi)}))) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  for (auto& x : v) x = (x - lo) / range;
}

ImageGrid normalize_minmax(const ImageGrid& img) {
  ImageGrid out = img;
  normalize_minmax_inplace(out);
  return out;
}

double mean(const ImageGrid& img) {
  return std::accumulate(img.values().begin(), img.values().end(), 0.0) / static_cast<double>(img.size());
}

}  // namespace brainprog::image
