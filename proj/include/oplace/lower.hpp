#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "oplace/pde.hpp"

namespace oplace {

// Relaxed selection variables: w over sensor candidates, sigma over time
// subintervals, both componentwise in [0,1].
struct Placement {
  Eigen::VectorXd w;
  Eigen::VectorXd sigma;

  Eigen::VectorXd flatten() const;
  static Placement unflatten(const Eigen::VectorXd& v, int n_s, int n_T);
};

// Sampled state values at candidate nodes for every time step.
struct ObservationSeries {
  Eigen::MatrixXd values;  // num_candidates x (n+2)
  double sd = 0.0;
  std::uint64_t seed = 0;
};

ObservationSeries observe(const Eigen::MatrixXd& y, const SpatialGrid& grid);
ObservationSeries make_observations(const Eigen::MatrixXd& y_true, const SpatialGrid& grid,
                                    double sd, std::uint64_t seed);

// One assimilation instance: fit the initial condition u to the observations
// under the placement weights, with background u_b.
struct DAProblem {
  const PdeModel* model = nullptr;
  Eigen::VectorXd u_b;
  ObservationSeries z_o;
  Eigen::MatrixXd forcing;
  double theta = 1e-2;
  double alpha = 0.1;  // B^{-1} = alpha I
  Placement placement;
};

// Sum_i sigma_i rho_i(t_s) for every step s.
Eigen::VectorXd sigma_rho_weights(const TimeGrid& tg, const Eigen::VectorXd& sigma);

double lower_cost(const DAProblem& prob, const Eigen::VectorXd& u);
Eigen::VectorXd lower_gradient(const DAProblem& prob, const Eigen::VectorXd& u);

struct AssimilateOptions {
  double tol_g = 1e-6;
  int max_iter = 100;
  int max_halvings = 40;
};

struct LowerSolution {
  Eigen::VectorXd u;
  Eigen::MatrixXd y;
  Eigen::MatrixXd p;
  double grad_norm = 0.0;
  int iterations = 0;
};

// BFGS over the interior initial-condition values, Armijo backtracking,
// discrete-L2 inner products.
LowerSolution assimilate(const DAProblem& prob, const Eigen::VectorXd& u_init,
                         const AssimilateOptions& opts = {});

}  // namespace oplace
