#include "brainprog/avc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "brainprog/error.hpp"
#include "brainprog/image_io.hpp"
#include "brainprog/parallel.hpp"
#include "brainprog/rng.hpp"

namespace brainprog::avc {

namespace {

std::size_t slot_of(Dimension dim) {
  for (std::size_t i = 0; i < dsl::kVisualDimensions.size(); ++i) {
    if (dsl::kVisualDimensions[i] == dim) return i;
  }
  throw Error("not a visual-operator dimension");
}

}  // namespace

VisualMap compute_visual_map(const Individual& ind, Dimension dim, const ColorDecomposition& dec) {
  const dsl::Environment env(dec);
  return {dim, dsl::evaluate_tree(ind.vo[slot_of(dim)], env)};
}

Pyramid build_pyramid(const ImageGrid& source) {
  if (source.width() < 2 || source.height() < 2) throw Error("build_pyramid: source smaller than 2x2");
  Pyramid p;
  p.levels.push_back(source);
  while (static_cast<int>(p.levels.size()) < kPyramidLevels) {
    const ImageGrid& last = p.levels.back();
    if (last.width() < 2 || last.height() < 2) break;
    p.levels.push_back(image::downsample_half(image::gaussian_blur(last, 1.0)));
  }
  return p;
}

std::vector<std::pair<int, int>> available_pairs(std::size_t level_count) {
  std::vector<std::pair<int, int>> out;
  for (const auto& pr : kCenterSurroundPairs) {
    if (static_cast<std::size_t>(pr.second) < level_count) out.push_back(pr);
  }
  return out;
}

ConspicuityMap center_surround(const Pyramid& pyramid, Dimension dim) {
  const auto& levels = pyramid.levels;
  const int w = levels.front().width();
  const int h = levels.front().height();
  auto abs_diff = [](const ImageGrid& a, const ImageGrid& b) {
    ImageGrid d(a.width(), a.height());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::abs(a[i] - b[i]);
    return d;
  };

  const auto pairs = available_pairs(levels.size());
  if (pairs.size() < 2) {
    const ImageGrid up = image::resize_unclamped(levels.back(), w, h);
    return {dim, image::normalize_minmax(abs_diff(levels.front(), up))};
  }

  std::vector<ImageGrid> upscaled(levels.size());
  auto up = [&](int level) -> const ImageGrid& {
    auto& slot = upscaled[static_cast<std::size_t>(level)];
    if (slot.empty()) slot = image::resize_unclamped(levels[static_cast<std::size_t>(level)], w, h);
    return slot;
  };
  ImageGrid sum(w, h, 0.0);
  for (const auto& [c, s] : pairs) {
    ImageGrid d = abs_diff(up(c), up(s));
    image::normalize_minmax_inplace(d);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += d[i];
  }
  image::normalize_minmax_inplace(sum);
  return {dim, std::move(sum)};
}

MentalMap compute_mental_map(const Individual& ind, const ConspicuityMap& cm) {
  if (ind.mm.empty()) throw Error("compute_mental_map: individual has no merge trees");
  const auto env = dsl::Environment::conspicuity(cm.map);
  ImageGrid sum(cm.map.width(), cm.map.height(), 0.0);
  for (const auto& tree : ind.mm) {
    const ImageGrid out = dsl::evaluate_tree(tree, env);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += out[i];
  }
  return {cm.dimension, std::move(sum)};
}

DescriptorVector build_descriptor(std::span<const MentalMap> maps, int n) {
  if (n < 1) throw ConfigError("descriptor length must be >= 1");
  std::size_t total = 0;
  for (const auto& m : maps) total += m.map.size();
  if (total < static_cast<std::size_t>(n)) {
    throw ConfigError("descriptor length " + std::to_string(n) + " exceeds pooled pixel count " +
                      std::to_string(total));
  }
  std::vector<std::pair<double, std::size_t>> pooled;
  pooled.reserve(total);
  for (const auto& m : maps) {
    for (double v : m.map.values()) pooled.emplace_back(v, pooled.size());
  }
  auto before = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
  const auto mid = pooled.begin() + n;
  std::nth_element(pooled.begin(), mid - 1, pooled.end(), before);
  std::sort(pooled.begin(), mid, before);
  DescriptorVector dv;
  dv.values.reserve(static_cast<std::size_t>(n));
  for (auto it = pooled.begin(); it != mid; ++it) dv.values.push_back(it->first);
  return dv;
}

ColorDecomposition prepare_image(const RgbImage& img, int working_size) {
  if (working_size < 2) throw ConfigError("working size must be >= 2");
  return image::decompose_colors(image::resize(img, working_size, working_size));
}

DescriptorVector describe_decomposition(const Individual& ind, const ColorDecomposition& dec, int n, Trace* trace) {
  std::vector<MentalMap> mental;
  mental.reserve(dsl::kVisualDimensions.size());
  for (Dimension dim : dsl::kVisualDimensions) {
    VisualMap vm = compute_visual_map(ind, dim, dec);
    ConspicuityMap cm = center_surround(build_pyramid(vm.map), dim);
    mental.push_back(compute_mental_map(ind, cm));
    if (trace) {
      trace->visual.push_back(std::move(vm));
      trace->conspicuity.push_back(std::move(cm));
    }
  }
  DescriptorVector dv = build_descriptor(mental, n);
  if (trace) trace->mental = std::move(mental);
  return dv;
}

DescriptorVector describe_image(const Individual& ind, const RgbImage& img, const AvcConfig& config) {
  return describe_decomposition(ind, prepare_image(img, config.working_size), config.descriptor_n);
}

void dump_maps(const Individual& ind, const RgbImage& img, const AvcConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Trace trace;
  describe_decomposition(ind, prepare_image(img, config.working_size), config.descriptor_n, &trace);
  for (std::size_t i = 0; i < trace.visual.size(); ++i) {
    const std::string name = dsl::dimension_name(trace.visual[i].dimension);
    image::save_png(trace.visual[i].map, dir / ("vm_" + name + ".png"));
    image::save_png(trace.conspicuity[i].map, dir / ("cm_" + name + ".png"));
    image::save_png(trace.mental[i].map, dir / ("mm_" + name + ".png"));
  }
}

std::vector<int> assign_folds(std::span<const int> labels, int folds, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  const std::size_t smallest = std::min(pos.size(), neg.size());
  if (smallest < 2) throw Error("cross-validation needs at least two samples of each class");
  folds = std::min<int>(folds, static_cast<int>(smallest));
  std::vector<int> fold(labels.size(), 0);
  Rng rng(derive_seed(seed, 0xf01d));
  for (auto* group : {&pos, &neg}) {
    rng.shuffle(group->begin(), group->end());
    for (std::size_t k = 0; k < group->size(); ++k) fold[(*group)[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  }
  return fold;
}

double fitness_from_descriptors(std::span<const std::vector<double>> descriptors, std::span<const int> labels,
                                const FitnessOptions& options) {
  if (descriptors.size() != labels.size()) throw Error("fitness: descriptor and label counts differ");
  const std::vector<int> fold = assign_folds(labels, options.folds, options.seed);
  const int folds = *std::max_element(fold.begin(), fold.end()) + 1;

  double total = 0.0;
  for (int f = 0; f < folds; ++f) {
    svm::LabeledVectors train;
    std::vector<std::size_t> test;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (fold[i] == f) {
        test.push_back(i);
      } else {
        train.x.push_back(descriptors[i]);
        train.y.push_back(labels[i]);
      }
    }
    svm::TrainOptions opts;
    opts.C = options.C;
    opts.seed = derive_seed(options.seed, 0xc5, static_cast<std::uint64_t>(f));
    const svm::LinearClassifier clf = svm::train_classifier(train, opts);
    std::vector<int> predicted, actual;
    for (std::size_t i : test) {
      predicted.push_back(clf.predict(descriptors[i]));
      actual.push_back(labels[i]);
    }
    total += svm::accuracy(predicted, actual);
  }
  return total / folds;
}

std::vector<std::vector<double>> describe_all(const Individual& ind, std::span<const ColorDecomposition> images,
                                              int n) {
  std::vector<std::vector<double>> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) { out[i] = describe_decomposition(ind, images[i], n).values; });
  return out;
}

double fitness(const Individual& ind, std::span<const ColorDecomposition> images, std::span<const int> labels,
               int descriptor_n, const FitnessOptions& options) {
  return fitness_from_descriptors(describe_all(ind, images, descriptor_n), labels, options);
}

}  // namespace brainprog::avc
