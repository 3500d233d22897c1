#include "oplace/mesh_time.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace oplace {

namespace {

SpatialGrid make_grid(int m) {
  if (m < 2) throw ValidationError("grid dimension must be at least 2, got " + std::to_string(m));
  SpatialGrid g;
  g.m = m;
  g.h = 1.0 / (m + 1);
  return g;
}

}  // namespace

SpatialGrid build_spatial_grid(int m) {
  SpatialGrid g = make_grid(m);
  g.candidate_ids.resize(g.num_nodes());
  for (int k = 0; k < g.num_nodes(); ++k) g.candidate_ids[k] = k;
  return g;
}

SpatialGrid build_spatial_grid(int m, const std::vector<Eigen::Vector2d>& candidate_points) {
  SpatialGrid g = make_grid(m);
  std::set<int> seen;
  for (const auto& p : candidate_points) {
    int k = nearest_node(g, p);
    if (!seen.insert(k).second)
      throw ValidationError("duplicate sensor candidate: two points snap to node " + std::to_string(k));
    g.candidate_ids.push_back(k);
  }
  return g;
}

int nearest_node(const SpatialGrid& grid, const Eigen::Vector2d& p) {
  if (p.x() < 0.0 || p.x() > 1.0 || p.y() < 0.0 || p.y() > 1.0)
    throw ValidationError("point outside the unit square");
  int best = 0;
  double bx = grid.node_x(0) - p.x();
  double by = grid.node_y(0) - p.y();
  double best_d2 = bx * bx + by * by;
  for (int k = 1; k < grid.num_nodes(); ++k) {
    double dx = grid.node_x(k) - p.x();
    double dy = grid.node_y(k) - p.y();
    double d2 = dx * dx + dy * dy;
    if (d2 < best_d2 - 1e-15 * (1.0 + best_d2)) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

TimeGrid build_time_grid(int n) {
  if (n < 1) throw ValidationError("time step count must be at least 1, got " + std::to_string(n));
  TimeGrid tg;
  tg.n = n;
  tg.tau = 1.0 / (n + 1);
  tg.n_T = n + 2;
  tg.subintervals.reserve(tg.n_T);
  for (int i = 0; i < tg.n_T; ++i)
    tg.subintervals.emplace_back(static_cast<double>(i) / tg.n_T, static_cast<double>(i + 1) / tg.n_T);
  return tg;
}

double mollifier_value(const TimeGrid& tg, int i, double t) {
  if (i < 0 || i >= tg.n_T) throw ValidationError("subinterval index out of range");
  auto [a, b] = tg.subintervals[i];
  if (t <= a || t >= b) return 0.0;
  // C^2 bump s^3(1-s)^3 normalized to unit time integral, so each rho_i
  // approximates an instantaneous observation within its subinterval.
  double s = (t - a) / (b - a);
  double q = s * (1.0 - s);
  return 140.0 / (b - a) * q * q * q;
}

}  // namespace oplace
