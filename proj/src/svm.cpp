#include "brainprog/svm.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "brainprog/error.hpp"
#include "brainprog/rng.hpp"

namespace brainprog::svm {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_training_data(const LabeledVectors& data) {
  if (data.x.empty()) throw TrainingError("train_svm: empty training set");
  if (data.x.size() != data.y.size()) throw TrainingError("train_svm: vector and label counts differ");
  const std::size_t d = data.dimension();
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.x[i].size() != d) throw TrainingError("train_svm: vectors differ in length");
    if (data.y[i] == 1) pos = true;
    else if (data.y[i] == -1) neg = true;
    else throw TrainingError("train_svm: labels must be -1 or +1");
  }
  if (!pos || !neg) throw TrainingError("train_svm: training data contains a single class");
}

/// Bias minimizing the summed hinge loss for fixed scores f_k = w.x_k.
/// The loss is piecewise linear with breakpoints y_k - f_k; its slope after
/// crossing k breakpoints is k - P, so the minimizers span the P-th to
/// (P+1)-th smallest breakpoint.
double optimal_bias(std::span<const double> scores, std::span<const int> y) {
  std::vector<double> bp(scores.size());
  std::size_t positives = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    bp[k] = y[k] - scores[k];
    positives += y[k] == 1;
  }
  std::sort(bp.begin(), bp.end());
  return 0.5 * (bp[positives - 1] + bp[positives]);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc()) throw LoadError("bad number '" + s + "'");
  return v;
}

}  // namespace

Scaler fit_scaler(std::span<const Vector> data) {
  if (data.empty()) throw Error("fit_scaler: empty data");
  const std::size_t d = data.front().size();
  Scaler s{Vector(d, 0.0), Vector(d, 0.0)};
  for (const auto& v : data) {
    if (v.size() != d) throw Error("fit_scaler: vectors differ in length");
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += v[j];
  }
  const auto n = static_cast<double>(data.size());
  for (auto& m : s.mean) m /= n;
  for (const auto& v : data) {
    for (std::size_t j = 0; j < d; ++j) s.stddev[j] += (v[j] - s.mean[j]) * (v[j] - s.mean[j]);
  }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(s.stddev[j] / n);
    if (sd > 1e-12) {
      s.stddev[j] = sd;
    } else {
      // Zero-variance features pass through unchanged.
      s.stddev[j] = 1.0;
      s.mean[j] = 0.0;
    }
  }
  return s;
}

Vector apply_scaler(const Scaler& scaler, std::span<const double> v) {
  if (v.size() != scaler.mean.size()) throw Error("apply_scaler: length mismatch");
  Vector out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = (v[j] - scaler.mean[j]) / scaler.stddev[j];
  return out;
}

TrainResult train_svm_detailed(const LabeledVectors& data, const TrainOptions& options) {
  check_training_data(data);
  if (!(options.C > 0.0)) throw TrainingError("train_svm: C must be positive");
  const std::size_t n = data.size();
  const double C = options.C;
  const auto& y = data.y;

  std::vector<double> K(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) K[i * n + j] = K[j * n + i] = dot(data.x[i], data.x[j]);
  }

  std::vector<double> alpha(n, 0.0);
  std::vector<double> grad(n, -1.0);  // Q alpha - e
  auto in_up = [&](std::size_t t) { return y[t] == 1 ? alpha[t] < C : alpha[t] > 0.0; };
  auto in_low = [&](std::size_t t) { return y[t] == 1 ? alpha[t] > 0.0 : alpha[t] < C; };
  auto viol = [&](std::size_t t) { return -y[t] * grad[t]; };

  // Largest violation over I_up and smallest over I_low; an index that cannot
  // beat the opposite extreme has no improving partner.
  double up_max = 0.0, low_min = 0.0;
  auto refresh_extremes = [&]() {
    up_max = -INFINITY;
    low_min = INFINITY;
    for (std::size_t k = 0; k < n; ++k) {
      const double v = viol(k);
      if (in_up(k)) up_max = std::max(up_max, v);
      if (in_low(k)) low_min = std::min(low_min, v);
    }
  };
  refresh_extremes();

  // Moves along alpha_u += y_u t, alpha_l -= y_l t, which keeps y'alpha fixed.
  auto update_pair = [&](std::size_t u, std::size_t l) {
    double curvature = K[u * n + u] + K[l * n + l] - 2.0 * K[u * n + l];
    curvature = std::max(curvature, 1e-12);
    double t = (viol(u) - viol(l)) / curvature;
    t = std::min(t, y[u] == 1 ? C - alpha[u] : alpha[u]);
    t = std::min(t, y[l] == 1 ? alpha[l] : C - alpha[l]);
    if (!(t > 0.0)) return;
    alpha[u] += y[u] * t;
    alpha[l] -= y[l] * t;
    alpha[u] = std::clamp(alpha[u], 0.0, C);
    alpha[l] = std::clamp(alpha[l], 0.0, C);
    for (std::size_t k = 0; k < n; ++k) grad[k] += t * y[k] * (K[k * n + u] - K[k * n + l]);
    refresh_extremes();
  };

  TrainResult result;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(options.seed, 0x5356u));
  std::vector<double> scores(n);
  double bias = 0.0;
  double primal = 0.0;

  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t i : order) {
      const bool up = in_up(i);
      const bool low = in_low(i);
      // Partner with the largest second-order decrease, i as "up" or as "low" member.
      const double vi = viol(i);
      if (!(up && vi - low_min > 1e-15) && !(low && up_max - vi > 1e-15)) continue;
      const double kii = K[i * n + i];
      std::size_t best = n;
      bool best_as_up = true;
      double best_gain = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double vj = viol(j);
        double diff = 0.0;
        bool as_up = true;
        if (up && in_low(j) && vi - vj > 1e-15) {
          diff = vi - vj;
        } else if (low && in_up(j) && vj - vi > 1e-15) {
          diff = vj - vi;
          as_up = false;
        } else {
          continue;
        }
        const double curvature = std::max(kii + K[j * n + j] - 2.0 * K[i * n + j], 1e-12);
        const double gain = diff * diff / curvature;
        if (gain > best_gain) {
          best_gain = gain;
          best = j;
          best_as_up = as_up;
        }
      }
      if (best != n) {
        if (best_as_up) {
          update_pair(i, best);
        } else {
          update_pair(best, i);
        }
      }
    }

    double quad = 0.0, lin = 0.0;  // alpha'Q alpha, e'alpha
    for (std::size_t k = 0; k < n; ++k) {
      quad += alpha[k] * (grad[k] + 1.0);
      lin += alpha[k];
      scores[k] = y[k] * (grad[k] + 1.0);
    }
    const double dual_min = 0.5 * quad - lin;
    result.dual_trace.push_back(dual_min);
    bias = optimal_bias(scores, y);
    double hinge = 0.0;
    for (std::size_t k = 0; k < n; ++k) hinge += std::max(0.0, 1.0 - y[k] * (scores[k] + bias));
    primal = 0.5 * quad + C * hinge;
    result.epochs = epoch;

    double m = -INFINITY, M = INFINITY;
    for (std::size_t k = 0; k < n; ++k) {
      if (in_up(k)) m = std::max(m, viol(k));
      if (in_low(k)) M = std::min(M, viol(k));
    }
    const double gap = primal + dual_min;  // primal - (e'a - 1/2 a'Qa)
    if (gap <= options.tolerance * std::max(1.0, std::abs(primal)) || m - M <= 1e-12) {
      result.converged = true;
      break;
    }
  }

  SvmModel model{Vector(data.dimension(), 0.0), 0.0, C};
  for (std::size_t k = 0; k < n; ++k) {
    if (alpha[k] == 0.0) continue;
    for (std::size_t j = 0; j < model.weights.size(); ++j) model.weights[j] += alpha[k] * y[k] * data.x[k][j];
  }
  for (std::size_t k = 0; k < n; ++k) scores[k] = dot(model.weights, data.x[k]);
  model.bias = optimal_bias(scores, y);
  result.model = std::move(model);
  result.primal_objective = primal_objective(result.model, data);
  return result;
}

SvmModel train_svm(const LabeledVectors& data, double C, std::uint64_t seed) {
  TrainOptions opts;
  opts.C = C;
  opts.seed = seed;
  return train_svm_detailed(data, opts).model;
}

double primal_objective(const SvmModel& model, const LabeledVectors& data) {
  double obj = 0.5 * dot(model.weights, model.weights);
  double hinge = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k) hinge += std::max(0.0, 1.0 - data.y[k] * decision(model, data.x[k]));
  return obj + model.C * hinge;
}

double decision(const SvmModel& model, std::span<const double> v) {
  if (v.size() != model.weights.size()) {
    throw Error("decision: vector length " + std::to_string(v.size()) + " does not match model dimension " +
                std::to_string(model.weights.size()));
  }
  return dot(model.weights, v) + model.bias;
}

int predict(const SvmModel& model, std::span<const double> v) { return decision(model, v) >= 0.0 ? 1 : -1; }

double accuracy(std::span<const int> predicted, std::span<const int> actual) {
  if (predicted.size() != actual.size()) throw Error("accuracy: length mismatch");
  if (predicted.empty()) throw Error("accuracy: no predictions");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == actual[i];
  return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

double LinearClassifier::decision(std::span<const double> v) const {
  return svm::decision(model, apply_scaler(scaler, v));
}

int LinearClassifier::predict(std::span<const double> v) const { return svm::predict(model, apply_scaler(scaler, v)); }

LinearClassifier train_classifier(const LabeledVectors& data, const TrainOptions& options) {
  check_training_data(data);
  LinearClassifier clf;
  clf.scaler = fit_scaler(data.x);
  LabeledVectors scaled{{}, data.y};
  scaled.x.reserve(data.size());
  for (const auto& v : data.x) scaled.x.push_back(apply_scaler(clf.scaler, v));
  clf.model = train_svm_detailed(scaled, options).model;
  return clf;
}

void save_classifier(const LinearClassifier& clf, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << clf.model.weights.size() << '\n' << format_double(clf.model.C) << '\n' << format_double(clf.model.bias) << '\n';
  for (double w : clf.model.weights) out << format_double(w) << '\n';
  for (std::size_t j = 0; j < clf.scaler.mean.size(); ++j) {
    out << format_double(clf.scaler.mean[j]) << ' ' << format_double(clf.scaler.stddev[j]) << '\n';
  }
}

LinearClassifier load_classifier(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read '" + path.string() + "'");
  std::string tok;
  auto next = [&]() {
    if (!(in >> tok)) throw LoadError("truncated model file '" + path.string() + "'");
    return parse_double(tok);
  };
  if (!(in >> tok)) throw LoadError("empty model file '" + path.string() + "'");
  const auto d = static_cast<std::size_t>(std::stoul(tok));
  LinearClassifier clf;
  clf.model.C = next();
  clf.model.bias = next();
  clf.model.weights.resize(d);
  for (auto& w : clf.model.weights) w = next();
  clf.scaler.mean.resize(d);
  clf.scaler.stddev.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    clf.scaler.mean[j] = next();
    clf.scaler.stddev[j] = next();
  }
  return clf;
}

}  // namespace brainprog::svm
