#include "oplace/sparsity.hpp"

#include <Eigen/Dense>

namespace oplace {

Eigen::Vector4d pi_coefficients(double eps) {
  if (!(eps > 0.0 && eps <= 0.5))
    throw ValidationError("penalty breakpoint eps must lie in (0, 1/2]");
  double e = eps;
  Eigen::Matrix4d A;
  // Rows: value 1/2 at eps/2, value 1 at 2*eps, slope 1/eps at eps/2,
  // slope 0 at 2*eps.
  A << e * e * e / 8.0, e * e / 4.0, e / 2.0, 1.0,
       8.0 * e * e * e, 4.0 * e * e, 2.0 * e, 1.0,
       3.0 * e * e / 4.0, e, 1.0, 0.0,
       12.0 * e * e, 4.0 * e, 1.0, 0.0;
  Eigen::Vector4d rhs(0.5, 1.0, 1.0 / e, 0.0);
  Eigen::Vector4d x = A.fullPivLu().solve(rhs);
  double res = (A * x - rhs).norm();
  if (res > 1e-12) throw NumericalError("bridge coefficient system residual " + std::to_string(res));
  return x;
}

PenaltyFamily::PenaltyFamily(double eps) : eps_(eps), coeffs_(pi_coefficients(eps)) {}

double PenaltyFamily::value(double x) const {
  if (x < 0.0 || x > 1.0) throw ValidationError("penalty argument outside [0,1]");
  if (x <= 0.5 * eps_) return x / eps_;
  if (x <= 2.0 * eps_) {
    const auto& c = coeffs_;
    return ((c[0] * x + c[1]) * x + c[2]) * x + c[3];
  }
  return 1.0;
}

double PenaltyFamily::derivative(double x) const {
  if (x < 0.0 || x > 1.0) throw ValidationError("penalty argument outside [0,1]");
  if (x <= 0.5 * eps_) return 1.0 / eps_;
  if (x <= 2.0 * eps_) {
    const auto& c = coeffs_;
    return (3.0 * c[0] * x + 2.0 * c[1]) * x + c[2];
  }
  return 0.0;
}

double PenaltyFamily::sum(const Eigen::VectorXd& v) const {
  double total = 0.0;
  for (int i = 0; i < v.size(); ++i) total += value(v[i]);
  return total;
}

}  // namespace oplace
