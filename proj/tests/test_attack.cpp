#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "brainprog/diffmodel.hpp"
#include "brainprog/error.hpp"
#include "brainprog/fgsm.hpp"
#include "test_util.hpp"

using namespace brainprog;
using namespace brainprog::attack;
using image::ImageGrid;
using image::RgbImage;

namespace {

Tensor random_tensor(Shape3 s, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.data) v = rng.uniform();
  return t;
}

RgbImage random_image(int size, Rng& rng) {
  RgbImage img(ImageGrid(size, size), ImageGrid(size, size), ImageGrid(size, size));
  for (auto* ch : {&img.r, &img.g, &img.b}) {
    for (auto& v : ch->values()) v = rng.uniform();
  }
  return img;
}

// Per-layer forward pass written from the layer definitions alone.
std::vector<double> logits_oracle(const DiffModel& m, const Tensor& x) {
  std::vector<double> cur = x.data;
  for (const Layer& l : m.layers) {
    const double* p = m.params.data() + l.offset;
    std::vector<double> next(l.out.size(), 0.0);
    auto in_at = [&](int c, int i, int j) {
      if (i < 0 || j < 0 || i >= l.in.height || j >= l.in.width) return 0.0;
      return cur[(static_cast<std::size_t>(c) * l.in.height + i) * l.in.width + j];
    };
    switch (l.kind) {
      case LayerKind::Conv3x3:
        for (int o = 0; o < l.out.channels; ++o) {
          for (int i = 0; i < l.out.height; ++i) {
            for (int j = 0; j < l.out.width; ++j) {
              double s = p[l.weight_count + o];
              for (int c = 0; c < l.in.channels; ++c) {
                for (int a = 0; a < 3; ++a) {
                  for (int b = 0; b < 3; ++b) s += p[((o * l.in.channels + c) * 3 + a) * 3 + b] * in_at(c, i + a - 1, j + b - 1);
                }
              }
              next[(static_cast<std::size_t>(o) * l.out.height + i) * l.out.width + j] = s;
            }
          }
        }
        break;
      case LayerKind::Relu:
        for (std::size_t k = 0; k < cur.size(); ++k) next[k] = std::max(0.0, cur[k]);
        break;
      case LayerKind::MaxPool2:
        for (int c = 0; c < l.out.channels; ++c) {
          for (int i = 0; i < l.out.height; ++i) {
            for (int j = 0; j < l.out.width; ++j) {
              next[(static_cast<std::size_t>(c) * l.out.height + i) * l.out.width + j] =
                  std::max({in_at(c, 2 * i, 2 * j), in_at(c, 2 * i, 2 * j + 1), in_at(c, 2 * i + 1, 2 * j),
                            in_at(c, 2 * i + 1, 2 * j + 1)});
            }
          }
        }
        break;
      case LayerKind::Dense:
        for (std::size_t o = 0; o < next.size(); ++o) {
          double s = p[l.weight_count + o];
          for (std::size_t i = 0; i < cur.size(); ++i) s += p[o * cur.size() + i] * cur[i];
          next[o] = s;
        }
        break;
    }
    cur = std::move(next);
  }
  return cur;
}

DiffModel small_model(LayerKind kind, std::uint64_t seed) {
  const Shape3 in{3, 8, 8};
  ModelBuilder b(in);
  switch (kind) {
    case LayerKind::Conv3x3: b.conv3x3(4); break;
    case LayerKind::Relu: b.conv3x3(3).relu(); break;
    case LayerKind::MaxPool2: b.conv3x3(3).maxpool2(); break;
    case LayerKind::Dense: break;
  }
  return b.dense(2).build(seed);
}

double relative_error(double a, double b) { return std::fabs(a - b) / std::max(1e-6, std::max(std::fabs(a), std::fabs(b))); }

}  // namespace

TEST(Softmax, UniformAndSaturated) {
  const auto p = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  const auto q = softmax(std::vector<double>{1000.0, -1000.0});
  EXPECT_EQ(q[0], 1.0);
  EXPECT_EQ(q[1], 0.0);
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> z(1 + rng.index(6));
    for (auto& v : z) v = rng.normal() * std::pow(10.0, rng.uniform(-2, 3));
    double s = 0;
    for (double v : softmax(z)) s += v;
    ASSERT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Loss, UniformAndSaturated) {
  DiffModel zero = make_linear({3, 2, 2}, 2, 1);
  std::fill(zero.params.begin(), zero.params.end(), 0.0);
  Rng rng(2);
  const Tensor x = random_tensor({3, 2, 2}, rng);
  EXPECT_NEAR(loss(zero, x, 0), std::log(2.0), 1e-15);
  DiffModel big = zero;
  big.params[big.layers[0].weight_count] = 1000;
  big.params[big.layers[0].weight_count + 1] = -1000;
  EXPECT_NEAR(loss(big, x, 0), 0.0, 1e-12);
  EXPECT_NEAR(loss(big, x, 1), 2000.0, 1e-9);
  EXPECT_THROW(loss(big, random_tensor({3, 3, 3}, rng), 0), Error);
}

TEST(Forward, MatchesLayerOracle) {
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const DiffModel m = make_cnn({16, 4, 6, 8, 2}, static_cast<std::uint64_t>(t));
    const Tensor x = random_tensor(m.input, rng);
    const auto a = logits(m, x);
    const auto b = logits_oracle(m, x);
    ASSERT_EQ(a.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(a[k], b[k], 1e-9);
    const auto p = forward(m, x);
    const auto q = softmax(b);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(p[k], q[k], 1e-9);
  }
}

TEST(Gradient, InputMatchesFiniteDifferencesPerLayerType) {
  Rng rng(4);
  for (LayerKind kind : {LayerKind::Conv3x3, LayerKind::Relu, LayerKind::MaxPool2, LayerKind::Dense}) {
    for (int t = 0; t < 20; ++t) {
      const DiffModel m = small_model(kind, static_cast<std::uint64_t>(100 * t + 7));
      const Tensor x = random_tensor(m.input, rng);
      const int label = t % 2;
      const Tensor g = grad_input(m, x, label);
      const double h = 1e-4;
      for (std::size_t k = 0; k < x.data.size(); ++k) {
        Tensor xp = x, xm = x;
        xp.data[k] += h;
        xm.data[k] -= h;
        const double fd = (loss(m, xp, label) - loss(m, xm, label)) / (2 * h);
        // kinks of ReLU or max-pool inside the stencil make the difference meaningless
        if (std::fabs(fd - g.data[k]) > 1e-6) {
          ASSERT_LT(relative_error(fd, g.data[k]), 1e-4) << "layer " << static_cast<int>(kind) << " pixel " << k;
        }
      }
    }
  }
}

TEST(Gradient, ParametersMatchFiniteDifferences) {
  Rng rng(5);
  DiffModel m = make_cnn({8, 2, 3, 4, 2}, 9);
  const Tensor x = random_tensor(m.input, rng);
  const Gradients g = backward(m, x, 1, true);
  EXPECT_NEAR(g.loss, loss(m, x, 1), 1e-12);
  for (std::size_t k = 0; k < m.params.size(); k += 3) {
    const double keep = m.params[k];
    m.params[k] = keep + 1e-5;
    const double lp = loss(m, x, 1);
    m.params[k] = keep - 1e-5;
    const double lm = loss(m, x, 1);
    m.params[k] = keep;
    const double fd = (lp - lm) / 2e-5;
    if (std::fabs(fd - g.params[k]) > 1e-7) {
      EXPECT_LT(relative_error(fd, g.params[k]), 1e-4) << k;
    }
  }
}

TEST(Gradient, LinearModelIsWeightDifference) {
  const DiffModel m = make_linear({3, 2, 2}, 2, 3);
  Rng rng(6);
  const Tensor x = random_tensor(m.input, rng);
  const auto p = forward(m, x);
  const Tensor g = grad_input(m, x, 0);
  const std::size_t n = x.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    // dL/dx = (p0 - 1) w0 + p1 w1 = p1 (w1 - w0)
    EXPECT_NEAR(g.data[i], p[1] * (m.params[n + i] - m.params[i]), 1e-12);
  }
}

TEST(Gradient, ZeroModelHasZeroInputGradient) {
  DiffModel m = make_cnn({8, 2, 2, 3, 2}, 1);
  std::fill(m.params.begin(), m.params.end(), 0.0);
  Rng rng(7);
  for (double v : grad_input(m, random_tensor(m.input, rng), 0).data) EXPECT_EQ(v, 0.0);
}

TEST(Fgsm, ZeroGradientLeavesImage) {
  DiffModel m = make_linear({3, 4, 4}, 2, 1);
  std::fill(m.params.begin(), m.params.end(), 0.0);
  Rng rng(8);
  const RgbImage x = random_image(4, rng);
  const AdversarialExample ex = fgsm(m, x, 0, 8);
  EXPECT_EQ(ex.perturbed, x);
  for (double v : ex.perturbation.rho.data) EXPECT_EQ(v, 0.0);
}

TEST(Fgsm, NormBoundAndExactMagnitude) {
  Rng rng(9);
  const DiffModel m = make_cnn({16, 4, 4, 8, 2}, 2);
  for (int eps : {2, 4, 8, 16, 32}) {
    const RgbImage x = random_image(16, rng);
    const Tensor g = grad_input(m, to_tensor(x), 1);
    const AdversarialExample ex = fgsm(m, x, 1, eps);
    EXPECT_EQ(ex.perturbation.epsilon, eps);
    const Tensor xt = to_tensor(x), pt = to_tensor(ex.perturbed);
    for (std::size_t k = 0; k < xt.data.size(); ++k) {
      const double diff = pt.data[k] - xt.data[k];
      ASSERT_LE(std::fabs(diff), eps / 255.0 + 1e-12);
      ASSERT_EQ(pt.data[k], std::clamp(xt.data[k] + ex.perturbation.rho.data[k], 0.0, 1.0));
      if (g.data[k] != 0.0) {
        ASSERT_EQ(std::fabs(ex.perturbation.rho.data[k]), eps / 255.0);
        const bool clipped = pt.data[k] == 0.0 || pt.data[k] == 1.0;
        if (!clipped) {
          ASSERT_NEAR(std::fabs(diff), eps / 255.0, 1e-12);
        }
      }
    }
  }
}

TEST(Fgsm, AllNonzeroGradients) {
  Rng rng(10);
  const RgbImage x = random_image(4, rng);
  Tensor g(Shape3{3, 4, 4});
  for (auto& v : g.data) v = rng.bernoulli(0.5) ? rng.uniform(0.1, 1) : -rng.uniform(0.1, 1);
  const AdversarialExample ex = fgsm_from_gradient(x, g, 0, 4);
  for (std::size_t k = 0; k < g.data.size(); ++k) {
    EXPECT_EQ(ex.perturbation.rho.data[k], (g.data[k] > 0 ? 4.0 : -4.0) / 255.0);
  }
  EXPECT_THROW(fgsm_from_gradient(x, g, 0, -1), Error);
  EXPECT_THROW(fgsm_from_gradient(x, g, 0, 256), Error);
}

TEST(Fgsm, IncreasesLossOfLinearModel) {
  const DiffModel m = make_linear({3, 8, 8}, 2, 4);
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    RgbImage x = random_image(8, rng);
    for (auto* ch : {&x.r, &x.g, &x.b}) {
      for (auto& v : ch->values()) v = 0.25 + 0.5 * v;  // far from the clip range
    }
    const AdversarialExample ex = fgsm(m, x, t % 2, 4);
    EXPECT_GT(loss(m, to_tensor(ex.perturbed), t % 2), loss(m, to_tensor(x), t % 2));
  }
}

TEST(IsAdversarial, Predicate) {
  const DiffModel m = make_linear({3, 2, 2}, 2, 5);
  Rng rng(12);
  const RgbImage x = random_image(2, rng);
  AdversarialExample same{x, x, {Tensor({3, 2, 2}), 8}, 0};
  EXPECT_FALSE(is_adversarial(m, same, NormOrder::infinity(), 1.0));

  // Push the input along the weight difference until the class flips.
  const int c = predict_class(m, to_tensor(x));
  const std::size_t n = 12;
  RgbImage flipped = x;
  Tensor rho({3, 2, 2});
  for (std::size_t k = 0; k < n; ++k) {
    const double w = m.params[(1 - c) * n + k] - m.params[c * n + k];
    rho.data[k] = (w > 0 ? 8.0 : -8.0) / 255.0;
  }
  Tensor xt = to_tensor(x);
  for (std::size_t k = 0; k < n; ++k) xt.data[k] += rho.data[k] * 100;  // large push, unconstrained
  flipped = to_image(xt);
  ASSERT_NE(predict_class(m, xt), c);
  const AdversarialExample ex{x, flipped, {rho, 8}, c};
  double linf = 0;
  const Tensor x0 = to_tensor(x);
  for (std::size_t k = 0; k < n; ++k) linf = std::max(linf, std::fabs(xt.data[k] - x0.data[k]));
  EXPECT_FALSE(is_adversarial(m, ex, NormOrder::infinity(), linf));  // strict inequality
  EXPECT_TRUE(is_adversarial(m, ex, NormOrder::infinity(), std::nextafter(linf, 10.0)));
}

TEST(IsAdversarial, FgsmFlipWithinBudget) {
  // A linear model whose decision sits right at x: any signed step flips it.
  DiffModel m = make_linear({3, 2, 2}, 2, 6);
  Rng rng(13);
  const RgbImage x(ImageGrid(2, 2, 0.5), ImageGrid(2, 2, 0.5), ImageGrid(2, 2, 0.5));
  const Tensor xt = to_tensor(x);
  const auto z = logits(m, xt);
  // shift class-1 bias so that class 0 wins by a hair
  m.params[m.layers[0].weight_count + 1] += z[0] - z[1] - 1e-6;
  ASSERT_EQ(predict_class(m, xt), 0);
  const AdversarialExample ex = fgsm(m, x, 0, 8);
  EXPECT_NE(predict_class(m, to_tensor(ex.perturbed)), 0);
  EXPECT_TRUE(is_adversarial(m, ex, NormOrder::infinity(), 16 / 255.0));
  EXPECT_FALSE(is_adversarial(m, ex, NormOrder::infinity(), 8 / 255.0));
}

TEST(Norm, Orders) {
  const std::vector<double> v{3.0, -4.0};
  EXPECT_EQ(norm(v, NormOrder::of(1)), 7.0);
  EXPECT_EQ(norm(v, NormOrder::of(2)), 5.0);
  EXPECT_EQ(norm(v, NormOrder::infinity()), 4.0);
  EXPECT_NEAR(norm(v, NormOrder::of(3)), std::cbrt(91.0), 1e-12);
  EXPECT_THROW(NormOrder::of(0), Error);
}

TEST(LinearGrowth, Identity) {
  const std::vector<double> w{1.0, -2.0};
  EXPECT_NEAR(linear_activation_growth(w, std::vector<double>{-0.1, 0.1}), -0.3, 1e-15);
  EXPECT_EQ(linear_activation_growth(w, std::vector<double>{0.0, 0.0}), 0.0);
  EXPECT_EQ(linear_activation_growth(w, std::vector<double>{2.0, 1.0}), 0.0);
  EXPECT_THROW(linear_activation_growth(w, std::vector<double>{1.0}), Error);
}

TEST(LinearGrowth, ScoreChangeOfLinearModel) {
  const DiffModel m = make_linear({3, 4, 4}, 2, 8);
  const std::size_t n = 48;
  Rng rng(14);
  const Tensor x = random_tensor(m.input, rng);
  const std::vector<double> w0(m.params.begin(), m.params.begin() + n);
  const double eps = 8 / 255.0;
  Tensor xr = x;
  std::vector<double> rho(n);
  double l1 = 0;
  for (std::size_t k = 0; k < n; ++k) {
    rho[k] = eps * (w0[k] > 0 ? 1 : w0[k] < 0 ? -1 : 0);
    xr.data[k] += rho[k];
    l1 += std::fabs(w0[k]);
  }
  const double change = logits(m, xr)[0] - logits(m, x)[0];
  EXPECT_NEAR(change, eps * l1, 1e-9);
  EXPECT_NEAR(linear_activation_growth(w0, rho), eps * l1, 1e-12);
}

TEST(TrainModel, MemorizesFourImages) {
  Rng rng(15);
  std::vector<Tensor> x;
  std::vector<int> y;
  for (int i = 0; i < 4; ++i) {
    x.push_back(random_tensor({3, 16, 16}, rng));
    y.push_back(i % 2);
  }
  TrainConfig cfg;
  cfg.batch_size = 4;
  const TrainOutcome out = train_model({16, 4, 4, 8, 2}, x, y, x, y, cfg);
  EXPECT_EQ(out.train_accuracy, 1.0);
  EXPECT_EQ(out.epoch_loss.size(), 40u);
  EXPECT_LT(out.epoch_loss.back(), out.epoch_loss.front());
}

TEST(TrainModel, DeterministicAndDivergenceReported) {
  Rng rng(16);
  std::vector<Tensor> x;
  std::vector<int> y;
  for (int i = 0; i < 8; ++i) {
    x.push_back(random_tensor({3, 8, 8}, rng));
    y.push_back(i % 2);
  }
  TrainConfig cfg;
  cfg.epochs = 5;
  const auto a = train_model({8, 2, 2, 4, 2}, x, y, x, y, cfg);
  const auto b = train_model({8, 2, 2, 4, 2}, x, y, x, y, cfg);
  EXPECT_EQ(a.model.params, b.model.params);
  cfg.learning_rate = 1e150;  // overflows on the second epoch
  try {
    train_model({8, 2, 2, 4, 2}, x, y, x, y, cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("learning rate"), std::string::npos);
  }
}

TEST(ModelFile, RoundTrip) {
  test::TempDir dir;
  const DiffModel m = make_cnn({16, 4, 4, 8, 2}, 3);
  save_model(m, dir / "m.bin", R"({"seed":3})");
  const DiffModel back = load_model(dir / "m.bin");
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.input, m.input);
  ASSERT_EQ(back.layers.size(), m.layers.size());
  Rng rng(17);
  const Tensor x = random_tensor(m.input, rng);
  EXPECT_EQ(logits(back, x), logits(m, x));
  EXPECT_THROW(load_model(dir / "missing.bin"), LoadError);
}

TEST(TensorConversion, RoundTrip) {
  Rng rng(18);
  const RgbImage img = random_image(5, rng);
  const Tensor t = to_tensor(img);
  EXPECT_EQ(t.shape, (Shape3{3, 5, 5}));
  EXPECT_EQ(t.data[25], img.g[0]);
  EXPECT_EQ(to_image(t), img);
}
