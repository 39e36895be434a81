#pragma once

#include <span>

#include "brainprog/diffmodel.hpp"
#include "brainprog/image.hpp"

namespace brainprog::attack {

/// Order p >= 1 of an L_p norm, or infinity.
class NormOrder {
 public:
  static NormOrder infinity() noexcept { return NormOrder(0); }
  static NormOrder of(int p);
  bool is_infinity() const noexcept { return p_ == 0; }
  int p() const noexcept { return p_; }

 private:
  explicit NormOrder(int p) : p_(p) {}
  int p_;
};

double norm(std::span<const double> v, NormOrder order);

struct Perturbation {
  Tensor rho;
  /// Budget in 8-bit units; |rho| <= epsilon / 255.
  int epsilon = 0;
};

struct AdversarialExample {
  image::RgbImage original;
  image::RgbImage perturbed;
  Perturbation perturbation;
  int source_class = 0;
};

/// rho = (epsilon/255) sign(grad), sign(0) = 0; perturbed = clip(x + rho, 0, 1).
AdversarialExample fgsm_from_gradient(const image::RgbImage& x, const Tensor& gradient, int source_class, int epsilon);
AdversarialExample fgsm(const DiffModel& model, const image::RgbImage& x, int source_class, int epsilon);

/// f(x) != f(x_rho) and |x - x_rho|_p < alpha.
bool is_adversarial(const DiffModel& model, const AdversarialExample& ex, NormOrder p, double alpha);

/// w . rho: the change of a linear score under perturbation rho.
double linear_activation_growth(std::span<const double> w, std::span<const double> rho);

}  // namespace brainprog::attack
