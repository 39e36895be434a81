#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "brainprog/dsl.hpp"
#include "brainprog/gp.hpp"
#include "brainprog/image.hpp"
#include "brainprog/svm.hpp"

namespace brainprog::avc {

using dsl::Dimension;
using gp::Individual;
using image::ColorDecomposition;
using image::ImageGrid;
using image::RgbImage;

struct AvcConfig {
  /// Inputs are resized to working_size x working_size before the pipeline.
  int working_size = 256;
  int descriptor_n = 128;
};

struct VisualMap {
  Dimension dimension;
  ImageGrid map;
};

struct Pyramid {
  std::vector<ImageGrid> levels;
};

struct ConspicuityMap {
  Dimension dimension;
  ImageGrid map;
};

struct MentalMap {
  Dimension dimension;
  ImageGrid map;
};

struct DescriptorVector {
  std::vector<double> values;
};

inline constexpr int kPyramidLevels = 9;
inline constexpr std::array<std::pair<int, int>, 6> kCenterSurroundPairs = {
    {{2, 5}, {2, 6}, {3, 6}, {3, 7}, {4, 7}, {4, 8}}};

VisualMap compute_visual_map(const Individual& ind, Dimension dim, const ColorDecomposition& dec);

/// Level 0 is the source; each next level is gaussian_blur(sigma 1) then
/// downsample_half, up to nine levels or until a side reaches one pixel.
Pyramid build_pyramid(const ImageGrid& source);

/// Center-surround pairs whose levels exist in a pyramid of the given depth.
std::vector<std::pair<int, int>> available_pairs(std::size_t level_count);

ConspicuityMap center_surround(const Pyramid& pyramid, Dimension dim);

/// Sum of every merge tree applied to the conspicuity map.
MentalMap compute_mental_map(const Individual& ind, const ConspicuityMap& cm);

/// The n largest values pooled over the four maps, in descending order.
DescriptorVector build_descriptor(std::span<const MentalMap> maps, int n);

/// Resize to the working resolution, then split into the ten color planes.
ColorDecomposition prepare_image(const RgbImage& img, int working_size);

struct Trace {
  std::vector<VisualMap> visual;
  std::vector<ConspicuityMap> conspicuity;
  std::vector<MentalMap> mental;
};

DescriptorVector describe_decomposition(const Individual& ind, const ColorDecomposition& dec, int n,
                                        Trace* trace = nullptr);
DescriptorVector describe_image(const Individual& ind, const RgbImage& img, const AvcConfig& config);

/// Writes the visual, conspicuity and mental maps as grayscale PNGs.
void dump_maps(const Individual& ind, const RgbImage& img, const AvcConfig& config,
               const std::filesystem::path& dir);

struct FitnessOptions {
  std::uint64_t seed = 0;
  double C = 1.0;
  int folds = 3;
};

/// Stratified k-fold assignment: fold index per sample, deterministic in seed.
/// Uses fewer folds when a class is too small; throws when a class has < 2 samples.
std::vector<int> assign_folds(std::span<const int> labels, int folds, std::uint64_t seed);

/// Mean cross-validated accuracy of a standardized linear SVM.
double fitness_from_descriptors(std::span<const std::vector<double>> descriptors, std::span<const int> labels,
                                const FitnessOptions& options);

/// Descriptors for prepared images, computed in parallel, in input order.
std::vector<std::vector<double>> describe_all(const Individual& ind, std::span<const ColorDecomposition> images,
                                              int n);

double fitness(const Individual& ind, std::span<const ColorDecomposition> images, std::span<const int> labels,
               int descriptor_n, const FitnessOptions& options);

}  // namespace brainprog::avc
