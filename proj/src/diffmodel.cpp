#include "brainprog/diffmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "brainprog/error.hpp"
#include "brainprog/parallel.hpp"

namespace brainprog::attack {

using image::ImageGrid;
using image::RgbImage;

Tensor to_tensor(const RgbImage& img) {
  Tensor t(Shape3{3, img.height(), img.width()});
  const std::size_t plane = img.r.size();
  std::copy(img.r.values().begin(), img.r.values().end(), t.data.begin());
  std::copy(img.g.values().begin(), img.g.values().end(), t.data.begin() + static_cast<long>(plane));
  std::copy(img.b.values().begin(), img.b.values().end(), t.data.begin() + static_cast<long>(2 * plane));
  return t;
}

RgbImage to_image(const Tensor& t) {
  if (t.shape.channels != 3) throw Error("to_image: tensor must have three channels");
  const std::size_t plane = static_cast<std::size_t>(t.shape.height) * t.shape.width;
  auto channel = [&](std::size_t c) {
    return ImageGrid(t.shape.width, t.shape.height,
                     std::vector<double>(t.data.begin() + static_cast<long>(c * plane),
                                         t.data.begin() + static_cast<long>((c + 1) * plane)));
  };
  return RgbImage(channel(0), channel(1), channel(2));
}

// ---------------------------------------------------------------------------
// Construction

ModelBuilder::ModelBuilder(Shape3 input) {
  if (input.channels < 1 || input.height < 1 || input.width < 1) throw Error("ModelBuilder: empty input shape");
  model_.input = input;
}

Shape3 ModelBuilder::current() const { return model_.layers.empty() ? model_.input : model_.layers.back().out; }

ModelBuilder& ModelBuilder::conv3x3(int out_channels) {
  const Shape3 in = current();
  Layer l{LayerKind::Conv3x3, in, Shape3{out_channels, in.height, in.width}};
  l.offset = model_.params.size();
  l.weight_count = static_cast<std::size_t>(out_channels) * in.channels * 9;
  l.bias_count = static_cast<std::size_t>(out_channels);
  model_.params.resize(l.offset + l.weight_count + l.bias_count, 0.0);
  model_.layers.push_back(l);
  return *this;
}

ModelBuilder& ModelBuilder::relu() {
  const Shape3 in = current();
  model_.layers.push_back(Layer{LayerKind::Relu, in, in, model_.params.size()});
  return *this;
}

ModelBuilder& ModelBuilder::maxpool2() {
  const Shape3 in = current();
  if (in.height < 2 || in.width < 2) throw Error("ModelBuilder: input too small for max pooling");
  model_.layers.push_back(
      Layer{LayerKind::MaxPool2, in, Shape3{in.channels, in.height / 2, in.width / 2}, model_.params.size()});
  return *this;
}

ModelBuilder& ModelBuilder::dense(int outputs) {
  const Shape3 in = current();
  Layer l{LayerKind::Dense, in, Shape3{outputs, 1, 1}};
  l.offset = model_.params.size();
  l.weight_count = static_cast<std::size_t>(outputs) * in.size();
  l.bias_count = static_cast<std::size_t>(outputs);
  model_.params.resize(l.offset + l.weight_count + l.bias_count, 0.0);
  model_.layers.push_back(l);
  return *this;
}

DiffModel ModelBuilder::build(std::uint64_t seed) const {
  DiffModel m = model_;
  Rng rng(seed);
  for (const auto& l : m.layers) {
    if (l.weight_count == 0) continue;
    const double fan_in = l.kind == LayerKind::Conv3x3 ? l.in.channels * 9.0 : static_cast<double>(l.in.size());
    const double sd = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < l.weight_count; ++i) m.params[l.offset + i] = sd * rng.normal();
  }
  return m;
}

DiffModel make_cnn(const Architecture& arch, std::uint64_t seed) {
  return ModelBuilder(Shape3{3, arch.input_size, arch.input_size})
      .conv3x3(arch.conv1_channels)
      .relu()
      .maxpool2()
      .conv3x3(arch.conv2_channels)
      .relu()
      .maxpool2()
      .dense(arch.hidden)
      .relu()
      .dense(arch.classes)
      .build(seed);
}

DiffModel make_linear(Shape3 input, int classes, std::uint64_t seed) {
  return ModelBuilder(input).dense(classes).build(seed);
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct ForwardState {
  std::vector<std::vector<double>> acts;            // acts[0] = input, acts[l+1] = output of layer l
  std::vector<std::vector<std::uint32_t>> argmax;   // per max-pool layer
};

void conv_forward(const Layer& l, const double* p, const std::vector<double>& x, std::vector<double>& y) {
  const int C = l.in.channels, H = l.in.height, W = l.in.width, O = l.out.channels;
  const double* bias = p + l.weight_count;
  y.assign(l.out.size(), 0.0);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int o = 0; o < O; ++o) {
    double* yo = y.data() + o * plane;
    std::fill(yo, yo + plane, bias[o]);
    for (int c = 0; c < C; ++c) {
      const double* xc = x.data() + c * plane;
      for (int ki = 0; ki < 3; ++ki) {
        for (int kj = 0; kj < 3; ++kj) {
          const double w = p[((static_cast<std::size_t>(o) * C + c) * 3 + ki) * 3 + kj];
          const int jlo = std::max(0, 1 - kj), jhi = std::min(W, W + 1 - kj);
          for (int i = 0; i < H; ++i) {
            const int ii = i + ki - 1;
            if (ii < 0 || ii >= H) continue;
            double* yrow = yo + static_cast<std::size_t>(i) * W;
            const double* xrow = xc + static_cast<std::size_t>(ii) * W + (kj - 1);
            for (int j = jlo; j < jhi; ++j) yrow[j] += w * xrow[j];
          }
        }
      }
    }
  }
}

void conv_backward(const Layer& l, const double* p, const std::vector<double>& x, const std::vector<double>& dy,
                   std::vector<double>& dx, double* dp) {
  const int C = l.in.channels, H = l.in.height, W = l.in.width, O = l.out.channels;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  dx.assign(l.in.size(), 0.0);
  for (int o = 0; o < O; ++o) {
    const double* dyo = dy.data() + o * plane;
    if (dp) {
      double s = 0.0;
      for (std::size_t k = 0; k < plane; ++k) s += dyo[k];
      dp[l.weight_count + static_cast<std::size_t>(o)] += s;
    }
    for (int c = 0; c < C; ++c) {
      const double* xc = x.data() + c * plane;
      double* dxc = dx.data() + c * plane;
      for (int ki = 0; ki < 3; ++ki) {
        for (int kj = 0; kj < 3; ++kj) {
          const std::size_t widx = ((static_cast<std::size_t>(o) * C + c) * 3 + ki) * 3 + kj;
          const double w = p[widx];
          const int jlo = std::max(0, 1 - kj), jhi = std::min(W, W + 1 - kj);
          double gw = 0.0;
          for (int i = 0; i < H; ++i) {
            const int ii = i + ki - 1;
            if (ii < 0 || ii >= H) continue;
            const double* dyrow = dyo + static_cast<std::size_t>(i) * W;
            const double* xrow = xc + static_cast<std::size_t>(ii) * W + (kj - 1);
            double* dxrow = dxc + static_cast<std::size_t>(ii) * W + (kj - 1);
            for (int j = jlo; j < jhi; ++j) {
              gw += dyrow[j] * xrow[j];
              dxrow[j] += w * dyrow[j];
            }
          }
          if (dp) dp[widx] += gw;
        }
      }
    }
  }
}

ForwardState run_forward(const DiffModel& model, const Tensor& x) {
  if (!(x.shape == model.input)) throw Error("forward: input shape does not match the model");
  ForwardState st;
  st.acts.reserve(model.layers.size() + 1);
  st.acts.push_back(x.data);
  for (const auto& l : model.layers) {
    const std::vector<double>& in = st.acts.back();
    std::vector<double> out;
    const double* p = model.params.data() + l.offset;
    switch (l.kind) {
      case LayerKind::Conv3x3:
        conv_forward(l, p, in, out);
        break;
      case LayerKind::Relu:
        out = in;
        for (auto& v : out) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::MaxPool2: {
        out.resize(l.out.size());
        std::vector<std::uint32_t> arg(l.out.size());
        const int H = l.in.height, W = l.in.width, OH = l.out.height, OW = l.out.width;
        for (int c = 0; c < l.out.channels; ++c) {
          for (int i = 0; i < OH; ++i) {
            for (int j = 0; j < OW; ++j) {
              std::size_t best = (static_cast<std::size_t>(c) * H + 2 * i) * W + 2 * j;
              for (int di = 0; di < 2; ++di) {
                for (int dj = 0; dj < 2; ++dj) {
                  const std::size_t idx = (static_cast<std::size_t>(c) * H + 2 * i + di) * W + 2 * j + dj;
                  if (in[idx] > in[best]) best = idx;
                }
              }
              const std::size_t o = (static_cast<std::size_t>(c) * OH + i) * OW + j;
              out[o] = in[best];
              arg[o] = static_cast<std::uint32_t>(best);
            }
          }
        }
        st.argmax.push_back(std::move(arg));
        break;
      }
      case LayerKind::Dense: {
        const std::size_t n_in = l.in.size();
        out.resize(l.out.size());
        for (std::size_t o = 0; o < out.size(); ++o) {
          const double* w = p + o * n_in;
          double s = p[l.weight_count + o];
          for (std::size_t k = 0; k < n_in; ++k) s += w[k] * in[k];
          out[o] = s;
        }
        break;
      }
    }
    st.acts.push_back(std::move(out));
  }
  return st;
}

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

void check_label(const DiffModel& model, int label) {
  if (label < 0 || label >= model.classes()) throw Error("label " + std::to_string(label) + " outside class range");
}

}  // namespace

std::vector<double> logits(const DiffModel& model, const Tensor& x) { return run_forward(model, x).acts.back(); }

std::vector<double> softmax(std::span<const double> z) {
  const double lse = log_sum_exp(z);
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - lse);
  return p;
}

std::vector<double> forward(const DiffModel& model, const Tensor& x) { return softmax(logits(model, x)); }

double loss(const DiffModel& model, const Tensor& x, int label) {
  check_label(model, label);
  const auto z = logits(model, x);
  return log_sum_exp(z) - z[static_cast<std::size_t>(label)];
}

int predict_class(const DiffModel& model, const Tensor& x) {
  const auto z = logits(model, x);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

Gradients backward(const DiffModel& model, const Tensor& x, int label, bool with_params) {
  check_label(model, label);
  ForwardState st = run_forward(model, x);
  const auto& z = st.acts.back();
  Gradients g;
  g.loss = log_sum_exp(z) - z[static_cast<std::size_t>(label)];
  if (with_params) g.params.assign(model.params.size(), 0.0);

  std::vector<double> dy = softmax(z);
  dy[static_cast<std::size_t>(label)] -= 1.0;
  std::size_t pool_index = st.argmax.size();
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const Layer& l = model.layers[li];
    const std::vector<double>& in = st.acts[li];
    const double* p = model.params.data() + l.offset;
    double* dp = with_params ? g.params.data() + l.offset : nullptr;
    std::vector<double> dx;
    switch (l.kind) {
      case LayerKind::Conv3x3:
        conv_backward(l, p, in, dy, dx, dp);
        break;
      case LayerKind::Relu:
        dx = dy;
        for (std::size_t k = 0; k < dx.size(); ++k) {
          if (!(in[k] > 0.0)) dx[k] = 0.0;
        }
        break;
      case LayerKind::MaxPool2: {
        const auto& arg = st.argmax[--pool_index];
        dx.assign(l.in.size(), 0.0);
        for (std::size_t o = 0; o < dy.size(); ++o) dx[arg[o]] += dy[o];
        break;
      }
      case LayerKind::Dense: {
        const std::size_t n_in = l.in.size();
        dx.assign(n_in, 0.0);
        for (std::size_t o = 0; o < dy.size(); ++o) {
          const double* w = p + o * n_in;
          const double d = dy[o];
          for (std::size_t k = 0; k < n_in; ++k) dx[k] += w[k] * d;
          if (dp) {
            double* gw = dp + o * n_in;
            for (std::size_t k = 0; k < n_in; ++k) gw[k] += d * in[k];
            dp[l.weight_count + o] += d;
          }
        }
        break;
      }
    }
    dy = std::move(dx);
  }
  g.input.shape = model.input;
  g.input.data = std::move(dy);
  return g;
}

Tensor grad_input(const DiffModel& model, const Tensor& x, int label) {
  return backward(model, x, label, false).input;
}

// ---------------------------------------------------------------------------
// Training

double class_accuracy(const DiffModel& model, std::span<const Tensor> x, std::span<const int> y) {
  if (x.size() != y.size() || x.empty()) throw Error("class_accuracy: bad sizes");
  std::vector<int> correct(x.size(), 0);
  parallel_for(x.size(), [&](std::size_t i) { correct[i] = predict_class(model, x[i]) == y[i]; });
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), 0)) / static_cast<double>(x.size());
}

TrainOutcome train_model(const Architecture& arch, std::span<const Tensor> train_x, std::span<const int> train_y,
                         std::span<const Tensor> val_x, std::span<const int> val_y, const TrainConfig& config) {
  if (train_x.size() != train_y.size() || train_x.empty()) throw TrainingError("train_model: bad training set");
  if (config.batch_size < 1 || config.epochs < 1) throw TrainingError("train_model: bad batch size or epoch count");
  std::vector<int> per_class(static_cast<std::size_t>(arch.classes), 0);
  for (int y : train_y) {
    if (y < 0 || y >= arch.classes) throw TrainingError("train_model: label outside class range");
    ++per_class[static_cast<std::size_t>(y)];
  }
  if (std::count_if(per_class.begin(), per_class.end(), [](int c) { return c > 0; }) < 2) {
    throw TrainingError("train_model: need at least two classes");
  }

  TrainOutcome outcome;
  DiffModel model = make_cnn(arch, derive_seed(config.seed, 1));
  std::vector<double> velocity(model.params.size(), 0.0);
  Rng rng(derive_seed(config.seed, 2));
  std::vector<std::size_t> order(train_x.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Gradients> sample_grads(static_cast<std::size_t>(config.batch_size));
  std::vector<double> grad(model.params.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate * std::pow(config.decay_factor, epoch / std::max(1, config.decay_every));
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), order.size() - start);
      parallel_for(count, [&](std::size_t k) {
        const std::size_t idx = order[start + k];
        sample_grads[k] = backward(model, train_x[idx], train_y[idx], true);
      });
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = 0; k < count; ++k) {
        batch_loss += sample_grads[k].loss;
        const auto& gp = sample_grads[k].params;
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += gp[i];
      }
      const double scale = 1.0 / static_cast<double>(count);
      bool finite = std::isfinite(batch_loss);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        velocity[i] = config.momentum * velocity[i] + grad[i] * scale;
        model.params[i] -= lr * velocity[i];
        finite = finite && std::isfinite(model.params[i]);
      }
      if (!finite) {
        throw TrainingError("training diverged (non-finite loss or parameters) at epoch " +
                            std::to_string(epoch + 1) + "; try a lower learning rate");
      }
      epoch_loss += batch_loss;
    }
    outcome.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }

  outcome.train_accuracy = class_accuracy(model, train_x, train_y);
  outcome.validation_accuracy = val_x.empty() ? 0.0 : class_accuracy(model, val_x, val_y);
  outcome.model = std::move(model);
  return outcome;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::Dense: return "dense";
  }
  return "?";
}

}  // namespace

void save_model(const DiffModel& model, const std::filesystem::path& path, const std::string& metadata_json) {
  static_assert(std::endian::native == std::endian::little, "model files are little-endian");
  nlohmann::json header;
  header["format"] = "brainprog-diffmodel";
  header["version"] = 1;
  header["input"] = {model.input.channels, model.input.height, model.input.width};
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers) {
    nlohmann::json j{{"type", kind_name(l.kind)}};
    if (l.kind == LayerKind::Conv3x3) j["out"] = l.out.channels;
    if (l.kind == LayerKind::Dense) j["out"] = l.out.size();
    layers.push_back(j);
  }
  header["layers"] = layers;
  header["param_count"] = model.params.size();
  header["metadata"] = nlohmann::json::parse(metadata_json);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(model.params.data()),
            static_cast<std::streamsize>(model.params.size() * sizeof(double)));
}

DiffModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw LoadError("bad model header in '" + path.string() + "': " + e.what());
  }
  if (header.value("format", "") != "brainprog-diffmodel") throw LoadError("'" + path.string() + "' is not a model file");
  const auto& shape = header.at("input");
  ModelBuilder b(Shape3{shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()});
  for (const auto& l : header.at("layers")) {
    const std::string type = l.at("type");
    if (type == "conv3x3") b.conv3x3(l.at("out").get<int>());
    else if (type == "relu") b.relu();
    else if (type == "maxpool2") b.maxpool2();
    else if (type == "dense") b.dense(l.at("out").get<int>());
    else throw LoadError("unknown layer type '" + type + "'");
  }
  DiffModel m = b.build(0);
  if (header.at("param_count").get<std::size_t>() != m.params.size()) throw LoadError("parameter count mismatch");
  in.read(reinterpret_cast<char*>(m.params.data()), static_cast<std::streamsize>(m.params.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(m.params.size() * sizeof(double))) {
    throw LoadError("truncated parameters in '" + path.string() + "'");
  }
  return m;
}

}  // namespace brainprog::attack
