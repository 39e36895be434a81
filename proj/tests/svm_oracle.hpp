#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "brainprog/svm.hpp"

namespace brainprog::test {

inline double golden_min(const std::function<double(double)>& f, double lo, double hi) {
  const double r = (std::sqrt(5.0) - 1) / 2;
  double a = lo, b = hi;
  double c = b - r * (b - a), d = a + r * (b - a);
  double fc = f(c), fd = f(d);
  for (int i = 0; i < 90; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - r * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + r * (b - a);
      fd = f(d);
    }
  }
  return std::min(fc, fd);
}

// Primal objective minimized by nested golden-section search over (w1, w2, b).
// The objective is jointly convex, so each partial minimum is convex in the rest.
inline double qp_oracle(const svm::LabeledVectors& data, double C) {
  auto objective = [&](double w1, double w2, double b) {
    double s = 0.5 * (w1 * w1 + w2 * w2);
    for (std::size_t i = 0; i < data.size(); ++i) {
      s += C * std::max(0.0, 1.0 - data.y[i] * (w1 * data.x[i][0] + w2 * data.x[i][1] + b));
    }
    return s;
  };
  // 1/2|w|^2 <= objective(0, 0, 0) = C n bounds w; optimal b sits at a margin breakpoint.
  const double wmax = std::sqrt(2.0 * C * static_cast<double>(data.size())) + 1e-9;
  const double bmax = 1.0 + wmax * std::sqrt(2.0) + 1e-9;
  return golden_min(
      [&](double w1) {
        return golden_min(
            [&](double w2) { return golden_min([&](double b) { return objective(w1, w2, b); }, -bmax, bmax); },
            -wmax, wmax);
      },
      -wmax, wmax);
}

}  // namespace brainprog::test
