#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <atomic>
#include <memory>
#include <optional>
#include <vector>

#include "oplace/mesh_time.hpp"

namespace oplace {

using SpMat = Eigen::SparseMatrix<double>;

// Smooth regularization of the absolute value's sign: g(y) = y/sqrt(y^2+eps^2).
struct Nonlinearity {
  double eps_reg = 0.1;
  bool enabled = true;
};

struct GDerivs {
  double g, gp, gpp;
};

GDerivs g_value_derivs(const Nonlinearity& nl, double y);

struct SolveCounters {
  std::atomic<long> parabolic{0};
  std::atomic<long> elliptic{0};
  void reset() { parabolic = 0; elliptic = 0; }
};

// Optional coupling term -g''(y) p zeta in the backward solve.
struct AdjointCoupling {
  const Eigen::MatrixXd* p = nullptr;
  const Eigen::MatrixXd* zeta = nullptr;
};

// Implicit-Euler discretization of d/dt - Laplace + g on the unit square with
// homogeneous Dirichlet conditions. Space-time fields are (m*m) x (n+2)
// matrices, column s holding the state at t_s = s*tau; column 0 is the
// initial (or, for backward solves, the time-zero trace of the solution).
class PdeModel {
 public:
  PdeModel(SpatialGrid grid, TimeGrid tg, Nonlinearity nl);

  const SpatialGrid& grid() const { return grid_; }
  const TimeGrid& tg() const { return tg_; }
  const Nonlinearity& nonlinearity() const { return nl_; }
  const SpMat& laplacian() const { return lap_; }  // -Laplace_h

  // Semilinear forward solve: (I + tau A) y_s + tau g(y_s) = y_{s-1} + tau f_s,
  // Newton per step to sup-norm residual 1e-10.
  Eigen::MatrixXd solve_forward(const Eigen::VectorXd& u0, const Eigen::MatrixXd& forcing) const;

  // Per-step factorizations of I + tau A + tau diag(g'(y_s)) around a state y.
  struct Linearization {
    Eigen::MatrixXd y;
    std::vector<std::shared_ptr<Eigen::SimplicialLDLT<SpMat>>> steps;  // s = 1..n+1
  };
  Linearization linearize(const Eigen::MatrixXd& y) const;

  // Tangent solve: eta_s = B_s^{-1} eta_{s-1}, eta_0 = h0.
  Eigen::MatrixXd solve_linearized(const Linearization& lin, const Eigen::VectorXd& h0) const;

  // Exact transpose of the linearized forward march, backward from p(T) = 0:
  //   B_s p_s = p_{s+1} + tau * (nodal_s / h^2 + volumetric_s - g''(y_s) p_s zeta_s).
  // nodal is num_candidates x (n+2); either source may be empty. Column 0 of
  // the result repeats p_1, the time-zero trace entering gradient formulas.
  Eigen::MatrixXd solve_adjoint(const Linearization& lin,
                                const Eigen::MatrixXd& nodal,
                                const Eigen::MatrixXd* volumetric = nullptr,
                                const AdjointCoupling* coupling = nullptr) const;

  // -theta Laplace_h v + alpha v = rhs with homogeneous Dirichlet data.
  Eigen::VectorXd solve_elliptic(const Eigen::VectorXd& rhs, double theta, double alpha) const;

  // Reusable factorization of theta * (-Laplace_h) + alpha I.
  class EllipticSolver {
   public:
    EllipticSolver(const PdeModel& model, double theta, double alpha);
    Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;

   private:
    const PdeModel& model_;
    Eigen::SimplicialLDLT<SpMat> factor_;
  };

  mutable SolveCounters counters;

  struct NewtonOptions {
    int max_iter = 25;
    double tol = 1e-10;
  };
  NewtonOptions newton;

 private:
  SpatialGrid grid_;
  TimeGrid tg_;
  Nonlinearity nl_;
  SpMat lap_;       // 5-point -Laplace with the implicit Dirichlet ring
  SpMat identity_;
};

}  // namespace oplace
