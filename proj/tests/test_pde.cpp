#include <doctest.h>

#include <cmath>
#include <random>

#include "oplace/pde.hpp"

using namespace oplace;

namespace {

constexpr double kPi = 3.14159265358979323846;

Eigen::VectorXd grid_mode(const SpatialGrid& g, int p, int q) {
  Eigen::VectorXd v(g.num_nodes());
  for (int k = 0; k < g.num_nodes(); ++k)
    v[k] = std::sin(p * kPi * g.node_x(k)) * std::sin(q * kPi * g.node_y(k));
  return v;
}

}  // namespace

TEST_CASE("regularized sign derivatives") {
  Nonlinearity nl{0.1, true};
  auto d0 = g_value_derivs(nl, 0.0);
  CHECK(d0.g == 0.0);
  CHECK(d0.gp == doctest::Approx(1.0 / nl.eps_reg).epsilon(1e-12));
  CHECK(d0.gpp == 0.0);

  // Odd function saturating at +-1.
  CHECK(g_value_derivs(nl, 5.0).g == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(g_value_derivs(nl, -0.3).g == doctest::Approx(-g_value_derivs(nl, 0.3).g));

  double h = 1e-6;
  for (double y : {-0.7, -0.05, 0.0, 0.02, 0.4, 2.0}) {
    auto d = g_value_derivs(nl, y);
    double fd_p = (g_value_derivs(nl, y + h).g - g_value_derivs(nl, y - h).g) / (2 * h);
    double fd_pp = (g_value_derivs(nl, y + h).gp - g_value_derivs(nl, y - h).gp) / (2 * h);
    CHECK(d.gp == doctest::Approx(fd_p).epsilon(1e-7));
    CHECK(d.gpp == doctest::Approx(fd_pp).epsilon(1e-6));
  }

  Nonlinearity off{0.1, false};
  auto z = g_value_derivs(off, 0.9);
  CHECK(z.g == 0.0);
  CHECK(z.gp == 0.0);
  CHECK(z.gpp == 0.0);
}

TEST_CASE("linear heat: implicit Euler damps Laplacian eigenmodes exactly") {
  SpatialGrid g = build_spatial_grid(9);
  TimeGrid tg = build_time_grid(7);
  PdeModel model(g, tg, Nonlinearity{0.1, false});

  for (auto [p, q] : {std::pair{1, 1}, std::pair{2, 3}}) {
    Eigen::VectorXd v = grid_mode(g, p, q);
    double sp = std::sin(0.5 * p * kPi * g.h), sq = std::sin(0.5 * q * kPi * g.h);
    double lambda = 4.0 / (g.h * g.h) * (sp * sp + sq * sq);
    CHECK((model.laplacian() * v - lambda * v).norm() <= 1e-10 * v.norm());

    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(g.num_nodes(), tg.n + 2);
    Eigen::MatrixXd y = model.solve_forward(v, f);
    double factor = 1.0;
    for (int s = 0; s <= tg.n + 1; ++s) {
      CHECK((y.col(s) - factor * v).norm() <= 1e-9 * v.norm());
      factor /= 1.0 + tg.tau * lambda;
    }
  }
}

TEST_CASE("semilinear forward solve satisfies the stepping residual") {
  SpatialGrid g = build_spatial_grid(6);
  TimeGrid tg = build_time_grid(4);
  PdeModel model(g, tg, Nonlinearity{0.1, true});

  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd u0(g.num_nodes());
  Eigen::MatrixXd f(g.num_nodes(), tg.n + 2);
  for (int k = 0; k < g.num_nodes(); ++k) {
    u0[k] = dist(rng);
    for (int s = 0; s < f.cols(); ++s) f(k, s) = dist(rng);
  }

  Eigen::MatrixXd y = model.solve_forward(u0, f);
  CHECK(y.col(0) == u0);
  for (int s = 1; s <= tg.n + 1; ++s) {
    Eigen::VectorXd gy(g.num_nodes());
    for (int k = 0; k < g.num_nodes(); ++k) gy[k] = g_value_derivs(model.nonlinearity(), y(k, s)).g;
    Eigen::VectorXd res = y.col(s) + tg.tau * (model.laplacian() * y.col(s)) + tg.tau * gy -
                          y.col(s - 1) - tg.tau * f.col(s);
    CHECK(res.lpNorm<Eigen::Infinity>() <= 1e-9);
  }
  CHECK(model.counters.parabolic >= 1);
}

TEST_CASE("linearized solve matches forward differences") {
  SpatialGrid g = build_spatial_grid(6);
  TimeGrid tg = build_time_grid(4);
  PdeModel model(g, tg, Nonlinearity{0.1, true});

  std::mt19937_64 rng(11);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd u0(g.num_nodes()), v(g.num_nodes());
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(g.num_nodes(), tg.n + 2);
  for (int k = 0; k < g.num_nodes(); ++k) {
    u0[k] = dist(rng);
    v[k] = dist(rng);
  }

  auto lin = model.linearize(model.solve_forward(u0, f));
  Eigen::MatrixXd dy = model.solve_linearized(lin, v);
  double d = 1e-6;
  Eigen::MatrixXd fd =
      (model.solve_forward(u0 + d * v, f) - model.solve_forward(u0 - d * v, f)) / (2 * d);
  CHECK((dy - fd).norm() <= 1e-6 * fd.norm());
}

TEST_CASE("adjoint solve is the exact transpose of the linearized march") {
  SpatialGrid g = build_spatial_grid(8);
  TimeGrid tg = build_time_grid(5);
  PdeModel model(g, tg, Nonlinearity{0.1, true});

  std::mt19937_64 rng(13);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd u0(g.num_nodes());
  Eigen::MatrixXd f(g.num_nodes(), tg.n + 2);
  for (int k = 0; k < g.num_nodes(); ++k) {
    u0[k] = dist(rng);
    for (int s = 0; s < f.cols(); ++s) f(k, s) = 0.3 * dist(rng);
  }
  auto lin = model.linearize(model.solve_forward(u0, f));

  for (int trial = 0; trial < 5; ++trial) {
    Eigen::VectorXd v(g.num_nodes());
    Eigen::MatrixXd q(g.num_nodes(), tg.n + 2);
    for (int k = 0; k < g.num_nodes(); ++k) {
      v[k] = dist(rng);
      for (int s = 0; s < q.cols(); ++s) q(k, s) = dist(rng);
    }
    Eigen::MatrixXd y = model.solve_linearized(lin, v);
    Eigen::MatrixXd p = model.solve_adjoint(lin, Eigen::MatrixXd(), &q);
    double lhs = 0.0;
    for (int s = 1; s <= tg.n + 1; ++s) lhs += tg.tau * y.col(s).dot(q.col(s));
    double rhs = v.dot(p.col(0));
    CHECK(std::abs(lhs - rhs) <= 1e-10 * v.norm() * q.norm());
  }
}

TEST_CASE("nodal adjoint sources carry the 1/h^2 Dirac weight") {
  SpatialGrid g = build_spatial_grid(5);
  TimeGrid tg = build_time_grid(3);
  PdeModel model(g, tg, Nonlinearity{0.1, false});
  Eigen::VectorXd u0 = Eigen::VectorXd::Zero(g.num_nodes());
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(g.num_nodes(), tg.n + 2);
  auto lin = model.linearize(model.solve_forward(u0, f));

  // A nodal source equals a volumetric source of 1/h^2 at the same node.
  Eigen::MatrixXd nodal = Eigen::MatrixXd::Zero(g.num_candidates(), tg.n + 2);
  nodal(7, 2) = 1.0;
  Eigen::MatrixXd vol = Eigen::MatrixXd::Zero(g.num_nodes(), tg.n + 2);
  vol(g.candidate_ids[7], 2) = 1.0 / (g.h * g.h);
  Eigen::MatrixXd pn = model.solve_adjoint(lin, nodal);
  Eigen::MatrixXd pv = model.solve_adjoint(lin, Eigen::MatrixXd(), &vol);
  CHECK((pn - pv).norm() <= 1e-12 * pv.norm());
}

TEST_CASE("elliptic solver inverts theta*(-Laplace) + alpha*I") {
  SpatialGrid g = build_spatial_grid(7);
  TimeGrid tg = build_time_grid(3);
  PdeModel model(g, tg, Nonlinearity{0.1, true});

  std::mt19937_64 rng(17);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd rhs(g.num_nodes());
  for (int k = 0; k < g.num_nodes(); ++k) rhs[k] = dist(rng);

  double theta = 0.03, alpha = 0.2;
  Eigen::VectorXd v = model.solve_elliptic(rhs, theta, alpha);
  CHECK((alpha * v + theta * (model.laplacian() * v) - rhs).norm() <= 1e-10 * rhs.norm());

  PdeModel::EllipticSolver solver(model, theta, alpha);
  CHECK((solver.solve(rhs) - v).norm() <= 1e-12 * v.norm());
  CHECK(model.counters.elliptic >= 2);
}
