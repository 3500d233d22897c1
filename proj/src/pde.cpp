#include "oplace/pde.hpp"

#include <cmath>

namespace oplace {

GDerivs g_value_derivs(const Nonlinearity& nl, double y) {
  if (!nl.enabled) return {0.0, 0.0, 0.0};
  double e2 = nl.eps_reg * nl.eps_reg;
  double r2 = y * y + e2;
  double r = std::sqrt(r2);
  return {y / r, e2 / (r2 * r), -3.0 * e2 * y / (r2 * r2 * r)};
}

PdeModel::PdeModel(SpatialGrid grid, TimeGrid tg, Nonlinearity nl)
    : grid_(std::move(grid)), tg_(tg), nl_(nl) {
  int nn = grid_.num_nodes();
  double ih2 = 1.0 / (grid_.h * grid_.h);
  int m = grid_.m;
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(5 * nn);
  for (int k = 0; k < nn; ++k) {
    int ix = k % m, iy = k / m;
    trips.emplace_back(k, k, 4.0 * ih2);
    if (ix > 0) trips.emplace_back(k, k - 1, -ih2);
    if (ix < m - 1) trips.emplace_back(k, k + 1, -ih2);
    if (iy > 0) trips.emplace_back(k, k - m, -ih2);
    if (iy < m - 1) trips.emplace_back(k, k + m, -ih2);
  }
  lap_.resize(nn, nn);
  lap_.setFromTriplets(trips.begin(), trips.end());
  identity_.resize(nn, nn);
  identity_.setIdentity();
}

Eigen::MatrixXd PdeModel::solve_forward(const Eigen::VectorXd& u0, const Eigen::MatrixXd& forcing) const {
  const int nn = grid_.num_nodes();
  const int ncol = tg_.n + 2;
  if (u0.size() != nn || forcing.rows() != nn || forcing.cols() != ncol)
    throw ValidationError("forward solve: field shape mismatch");
  const double tau = tg_.tau;
  Eigen::MatrixXd y(nn, ncol);
  y.col(0) = u0;

  Eigen::VectorXd x = u0;
  for (int s = 1; s < ncol; ++s) {
    Eigen::VectorXd rhs = y.col(s - 1) + tau * forcing.col(s);
    double res_norm = 0.0;
    bool done = false;
    for (int it = 0; it <= newton.max_iter; ++it) {
      Eigen::VectorXd gx(nn), gpx(nn);
      for (int d = 0; d < nn; ++d) {
        GDerivs g = g_value_derivs(nl_, x[d]);
        gx[d] = g.g;
        gpx[d] = g.gp;
      }
      Eigen::VectorXd res = x + tau * (lap_ * x) + tau * gx - rhs;
      res_norm = res.lpNorm<Eigen::Infinity>();
      if (res_norm <= newton.tol) {
        done = true;
        break;
      }
      if (it == newton.max_iter) break;
      SpMat jac = identity_ + tau * lap_;
      for (int d = 0; d < nn; ++d) jac.coeffRef(d, d) += tau * gpx[d];
      Eigen::SimplicialLDLT<SpMat> fac(jac);
      x -= fac.solve(res);
    }
    if (!done) throw NonconvergenceError("Newton failed in forward solve", s, res_norm);
    y.col(s) = x;
  }
  counters.parabolic++;
  return y;
}

PdeModel::Linearization PdeModel::linearize(const Eigen::MatrixXd& y) const {
  Linearization lin;
  lin.y = y;
  const double tau = tg_.tau;
  const int nn = grid_.num_nodes();
  lin.steps.reserve(tg_.num_steps());
  for (int s = 1; s <= tg_.num_steps(); ++s) {
    SpMat mat = identity_ + tau * lap_;
    for (int d = 0; d < nn; ++d) {
      GDerivs g = g_value_derivs(nl_, y(d, s));
      if (g.gp < 0.0) throw NumericalError("nonlinearity lost monotonicity");
      mat.coeffRef(d, d) += tau * g.gp;
    }
    lin.steps.push_back(std::make_shared<Eigen::SimplicialLDLT<SpMat>>(mat));
  }
  return lin;
}

Eigen::MatrixXd PdeModel::solve_linearized(const Linearization& lin, const Eigen::VectorXd& h0) const {
  const int ncol = tg_.n + 2;
  Eigen::MatrixXd eta(grid_.num_nodes(), ncol);
  eta.col(0) = h0;
  Eigen::VectorXd x = h0;
  for (int s = 1; s < ncol; ++s) {
    x = lin.steps[s - 1]->solve(x);
    eta.col(s) = x;
  }
  counters.parabolic++;
  return eta;
}

Eigen::MatrixXd PdeModel::solve_adjoint(const Linearization& lin,
                                        const Eigen::MatrixXd& nodal,
                                        const Eigen::MatrixXd* volumetric,
                                        const AdjointCoupling* coupling) const {
  const int nn = grid_.num_nodes();
  const int ncol = tg_.n + 2;
  const double tau = tg_.tau;
  const double ih2 = 1.0 / (grid_.h * grid_.h);
  if (nodal.size() != 0 &&
      (nodal.rows() != grid_.num_candidates() || nodal.cols() != ncol))
    throw ValidationError("adjoint solve: nodal source shape mismatch");
  if (volumetric && (volumetric->rows() != nn || volumetric->cols() != ncol))
    throw ValidationError("adjoint solve: volumetric source shape mismatch");

  Eigen::MatrixXd p(nn, ncol);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(nn);
  for (int s = ncol - 1; s >= 1; --s) {
    Eigen::VectorXd src = Eigen::VectorXd::Zero(nn);
    if (nodal.size() != 0)
      for (int c = 0; c < grid_.num_candidates(); ++c)
        src[grid_.candidate_ids[c]] += nodal(c, s) * ih2;
    if (volumetric) src += volumetric->col(s);
    if (coupling) {
      for (int k = 0; k < nn; ++k) {
        GDerivs g = g_value_derivs(nl_, lin.y(k, s));
        src[k] -= g.gpp * (*coupling->p)(k, s) * (*coupling->zeta)(k, s);
      }
    }
    x = lin.steps[s - 1]->solve((x + tau * src).eval());
    p.col(s) = x;
  }
  p.col(0) = p.col(1);  // time-zero trace
  counters.parabolic++;
  return p;
}

PdeModel::EllipticSolver::EllipticSolver(const PdeModel& model, double theta, double alpha)
    : model_(model) {
  if (theta <= 0.0 || alpha <= 0.0)
    throw ValidationError("elliptic solve requires positive theta and alpha");
  SpMat mat = theta * model.lap_ + alpha * model.identity_;
  factor_.compute(mat);
}

Eigen::VectorXd PdeModel::EllipticSolver::solve(const Eigen::VectorXd& rhs) const {
  model_.counters.elliptic++;
  return factor_.solve(rhs);
}

Eigen::VectorXd PdeModel::solve_elliptic(const Eigen::VectorXd& rhs, double theta, double alpha) const {
  return EllipticSolver(*this, theta, alpha).solve(rhs);
}

}  // namespace oplace
