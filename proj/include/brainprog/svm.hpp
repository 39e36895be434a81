#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace brainprog::svm {

using Vector = std::vector<double>;

/// Per-feature standardization; zero-variance features keep std 1.
struct Scaler {
  Vector mean;
  Vector stddev;
};

Scaler fit_scaler(std::span<const Vector> data);
Vector apply_scaler(const Scaler& scaler, std::span<const double> v);

/// Feature vectors with labels in {-1, +1}.
struct LabeledVectors {
  std::vector<Vector> x;
  std::vector<int> y;

  std::size_t size() const noexcept { return x.size(); }
  std::size_t dimension() const noexcept { return x.empty() ? 0 : x.front().size(); }
};

struct SvmModel {
  Vector weights;
  double bias = 0.0;
  double C = 1.0;
};

struct TrainOptions {
  double C = 1.0;
  std::uint64_t seed = 0;
  /// Relative duality gap at which training stops.
  double tolerance = 1e-4;
  int max_epochs = 1000;
};

struct TrainResult {
  SvmModel model;
  int epochs = 0;
  bool converged = false;
  double primal_objective = 0.0;
  /// Dual objective value after each epoch, minimization form 1/2 a'Qa - e'a.
  std::vector<double> dual_trace;
};

/// Soft-margin linear SVM, min 1/2|w|^2 + C sum hinge(y (w.x + b)), solved in
/// the dual by pairwise coordinate descent over a seeded visiting order.
TrainResult train_svm_detailed(const LabeledVectors& data, const TrainOptions& options);
SvmModel train_svm(const LabeledVectors& data, double C, std::uint64_t seed);

double primal_objective(const SvmModel& model, const LabeledVectors& data);

double decision(const SvmModel& model, std::span<const double> v);
/// Sign of the decision value; exactly zero maps to +1.
int predict(const SvmModel& model, std::span<const double> v);

/// Fraction of positions where predicted equals actual.
double accuracy(std::span<const int> predicted, std::span<const int> actual);

/// Scaler plus model, as used for descriptor classification.
struct LinearClassifier {
  Scaler scaler;
  SvmModel model;

  double decision(std::span<const double> v) const;
  int predict(std::span<const double> v) const;
};

LinearClassifier train_classifier(const LabeledVectors& data, const TrainOptions& options);

void save_classifier(const LinearClassifier& clf, const std::filesystem::path& path);
LinearClassifier load_classifier(const std::filesystem::path& path);

}  // namespace brainprog::svm
