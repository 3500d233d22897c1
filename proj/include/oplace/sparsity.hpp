#pragma once

#include <Eigen/Core>

#include "oplace/errors.hpp"

namespace oplace {

// Concave surrogate of the counting norm on [0,1]: linear ramp x/eps up to
// eps/2, a C^1 cubic bridge on (eps/2, 2*eps], and constant 1 beyond.
class PenaltyFamily {
 public:
  explicit PenaltyFamily(double eps);

  double eps() const { return eps_; }
  // Cubic coefficients (a, b, c, e) of the bridge a x^3 + b x^2 + c x + e.
  Eigen::Vector4d coefficients() const { return coeffs_; }

  double value(double x) const;
  double derivative(double x) const;
  double sum(const Eigen::VectorXd& v) const;

 private:
  double eps_;
  Eigen::Vector4d coeffs_;
};

// Solves the 4x4 interpolation system for the bridge coefficients; residual
// is asserted below 1e-12.
Eigen::Vector4d pi_coefficients(double eps);

}  // namespace oplace
