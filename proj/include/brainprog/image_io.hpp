#pragma once

#include <filesystem>

#include "brainprog/image.hpp"

namespace brainprog::image {

/// Reads an 8-bit PNG or JPEG; values scaled by 1/255, grayscale replicated.
RgbImage load_image(const std::filesystem::path& path);

/// Writes an 8-bit RGB PNG, each value rounded from [0,1] x 255 after clamping.
void save_png(const RgbImage& img, const std::filesystem::path& path);
/// Writes an 8-bit grayscale PNG.
void save_png(const ImageGrid& img, const std::filesystem::path& path);

/// Rounds every channel to the nearest multiple of 1/255.
RgbImage quantize8(const RgbImage& img);

}  // namespace brainprog::image
