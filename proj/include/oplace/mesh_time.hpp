#pragma once

#include <Eigen/Core>
#include <vector>

#include "oplace/errors.hpp"

namespace oplace {

// Uniform m x m grid of free nodes inside the unit square, node k = iy*m + ix
// at ((ix+1)h, (iy+1)h) with h = 1/(m+1). The homogeneous Dirichlet boundary
// ring is implicit: it carries no unknowns and no sensor candidates.
struct SpatialGrid {
  int m = 0;
  double h = 0.0;
  std::vector<int> candidate_ids;  // sensor-candidate node indices

  int num_nodes() const { return m * m; }
  int num_candidates() const { return static_cast<int>(candidate_ids.size()); }

  double node_x(int k) const { return (k % m + 1) * h; }
  double node_y(int k) const { return (k / m + 1) * h; }
};

// All grid nodes are sensor candidates.
SpatialGrid build_spatial_grid(int m);
// Candidates restricted to the nodes nearest to the given points.
SpatialGrid build_spatial_grid(int m, const std::vector<Eigen::Vector2d>& candidate_points);

// Index of the node closest to p, ties broken by lowest index.
int nearest_node(const SpatialGrid& grid, const Eigen::Vector2d& p);

// Implicit-Euler time partition of [0,1]: step tau = 1/(n+1), states at
// t_s = s*tau for s = 0..n+1, and n_T = n+2 equal observation subintervals.
struct TimeGrid {
  int n = 0;
  double tau = 0.0;
  int n_T = 0;
  std::vector<std::pair<double, double>> subintervals;

  int num_steps() const { return n + 1; }  // steps s = 1..n+1
  double step_time(int s) const { return s * tau; }
  double T() const { return 1.0; }
};

TimeGrid build_time_grid(int n);

// C^2 bump on subinterval i: 140/(b-a) s^3 (1-s)^3 in local coordinates, zero
// outside, normalized to unit time integral.
double mollifier_value(const TimeGrid& tg, int i, double t);

}  // namespace oplace
