#include "brainprog/fgsm.hpp"

#include <algorithm>
#include <cmath>

#include "brainprog/error.hpp"

namespace brainprog::attack {

NormOrder NormOrder::of(int p) {
  if (p < 1) throw Error("norm order must be >= 1");
  return NormOrder(p);
}

double norm(std::span<const double> v, NormOrder order) {
  if (order.is_infinity()) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  }
  double s = 0.0;
  for (double x : v) s += std::pow(std::abs(x), order.p());
  return std::pow(s, 1.0 / order.p());
}

AdversarialExample fgsm_from_gradient(const image::RgbImage& x, const Tensor& gradient, int source_class, int epsilon) {
  if (epsilon < 0 || epsilon > 255) throw Error("fgsm: epsilon must be an integer in [0, 255]");
  Tensor input = to_tensor(x);
  if (!(gradient.shape == input.shape)) throw Error("fgsm: gradient shape does not match the image");
  const double step = epsilon / 255.0;
  Perturbation pert{Tensor(input.shape), epsilon};
  for (std::size_t i = 0; i < input.data.size(); ++i) {
    const double g = gradient.data[i];
    const double rho = g > 0.0 ? step : (g < 0.0 ? -step : 0.0);
    pert.rho.data[i] = rho;
    input.data[i] = std::clamp(input.data[i] + rho, 0.0, 1.0);
  }
  return AdversarialExample{x, to_image(input), std::move(pert), source_class};
}

AdversarialExample fgsm(const DiffModel& model, const image::RgbImage& x, int source_class, int epsilon) {
  return fgsm_from_gradient(x, grad_input(model, to_tensor(x), source_class), source_class, epsilon);
}

bool is_adversarial(const DiffModel& model, const AdversarialExample& ex, NormOrder p, double alpha) {
  const Tensor a = to_tensor(ex.original);
  const Tensor b = to_tensor(ex.perturbed);
  if (predict_class(model, a) == predict_class(model, b)) return false;
  std::vector<double> diff(a.data.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = a.data[i] - b.data[i];
  return norm(diff, p) < alpha;
}

double linear_activation_growth(std::span<const double> w, std::span<const double> rho) {
  if (w.size() != rho.size()) throw Error("linear_activation_growth: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * rho[i];
  return s;
}

}  // namespace brainprog::attack
