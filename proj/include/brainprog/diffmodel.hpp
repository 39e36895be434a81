#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "brainprog/image.hpp"
#include "brainprog/rng.hpp"

namespace brainprog::attack {

struct Shape3 {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(channels) * height * width; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Channel-major (c, y, x) tensor.
struct Tensor {
  Shape3 shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape3 s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
};

Tensor to_tensor(const image::RgbImage& img);
image::RgbImage to_image(const Tensor& t);

enum class LayerKind { Conv3x3, Relu, MaxPool2, Dense };

struct Layer {
  LayerKind kind;
  Shape3 in;
  Shape3 out;
  /// Offset of this layer's weights (then biases) in DiffModel::params.
  std::size_t offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_count = 0;
};

/// Feed-forward classifier ending in logits; softmax is applied by the loss.
struct DiffModel {
  Shape3 input;
  std::vector<Layer> layers;
  std::vector<double> params;

  int classes() const noexcept { return layers.empty() ? 0 : static_cast<int>(layers.back().out.size()); }
};

/// Builds a layer stack; parameters get He-normal weights and zero biases.
class ModelBuilder {
 public:
  explicit ModelBuilder(Shape3 input);
  ModelBuilder& conv3x3(int out_channels);
  ModelBuilder& relu();
  ModelBuilder& maxpool2();
  ModelBuilder& dense(int outputs);
  DiffModel build(std::uint64_t seed) const;

 private:
  Shape3 current() const;
  DiffModel model_;
};

struct Architecture {
  int input_size = 64;
  int conv1_channels = 8;
  int conv2_channels = 16;
  int hidden = 32;
  int classes = 2;
};

/// 2 x (conv3x3 - ReLU - maxpool2), dense-hidden, ReLU, dense-classes.
DiffModel make_cnn(const Architecture& arch, std::uint64_t seed);
/// A single dense layer from the flattened input to `classes` logits.
DiffModel make_linear(Shape3 input, int classes, std::uint64_t seed);

std::vector<double> logits(const DiffModel& model, const Tensor& x);
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> forward(const DiffModel& model, const Tensor& x);
/// Cross-entropy -log p(label), computed with log-sum-exp.
double loss(const DiffModel& model, const Tensor& x, int label);
int predict_class(const DiffModel& model, const Tensor& x);

struct Gradients {
  double loss = 0.0;
  std::vector<double> params;
  Tensor input;
};

/// Reverse-mode gradient of the loss; parameter gradients only when requested.
Gradients backward(const DiffModel& model, const Tensor& x, int label, bool with_params);
Tensor grad_input(const DiffModel& model, const Tensor& x, int label);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int decay_every = 10;
  double decay_factor = 0.5;
  std::uint64_t seed = 1;
};

struct TrainOutcome {
  DiffModel model;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Minibatch SGD with momentum and step decay; classes are 0..classes-1.
TrainOutcome train_model(const Architecture& arch, std::span<const Tensor> train_x, std::span<const int> train_y,
                         std::span<const Tensor> val_x, std::span<const int> val_y, const TrainConfig& config);

double class_accuracy(const DiffModel& model, std::span<const Tensor> x, std::span<const int> y);

/// Flat little-endian float64 parameters after a one-line JSON header.
void save_model(const DiffModel& model, const std::filesystem::path& path, const std::string& metadata_json = "{}");
DiffModel load_model(const std::filesystem::path& path);

}  // namespace brainprog::attack
