#include "oplace/lower.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>

namespace oplace {

Eigen::VectorXd Placement::flatten() const {
  Eigen::VectorXd v(w.size() + sigma.size());
  v << w, sigma;
  return v;
}

Placement Placement::unflatten(const Eigen::VectorXd& v, int n_s, int n_T) {
  if (v.size() != n_s + n_T) throw ValidationError("placement vector length mismatch");
  return {v.head(n_s), v.tail(n_T)};
}

ObservationSeries observe(const Eigen::MatrixXd& y, const SpatialGrid& grid) {
  ObservationSeries z;
  z.values.resize(grid.num_candidates(), y.cols());
  for (int c = 0; c < grid.num_candidates(); ++c)
    z.values.row(c) = y.row(grid.candidate_ids[c]);
  return z;
}

ObservationSeries make_observations(const Eigen::MatrixXd& y_true, const SpatialGrid& grid,
                                    double sd, std::uint64_t seed) {
  if (sd < 0.0) throw ValidationError("noise standard deviation must be nonnegative");
  ObservationSeries z = observe(y_true, grid);
  z.sd = sd;
  z.seed = seed;
  if (sd > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sd);
    for (int c = 0; c < z.values.rows(); ++c)
      for (int s = 0; s < z.values.cols(); ++s) z.values(c, s) += noise(rng);
  }
  return z;
}

Eigen::VectorXd sigma_rho_weights(const TimeGrid& tg, const Eigen::VectorXd& sigma) {
  if (sigma.size() != tg.n_T) throw ValidationError("sigma length does not match subinterval count");
  Eigen::VectorXd sr = Eigen::VectorXd::Zero(tg.n + 2);
  for (int s = 0; s <= tg.n + 1; ++s) {
    double t = tg.step_time(s);
    int i = std::min(static_cast<int>(t * tg.n_T), tg.n_T - 1);
    sr[s] = sigma[i] * mollifier_value(tg, i, t);
  }
  return sr;
}

namespace {

struct Evaluation {
  double cost;
  Eigen::VectorXd grad;  // full field
  Eigen::MatrixXd y;
  Eigen::MatrixXd p;
};

void check_shapes(const DAProblem& prob) {
  const auto& grid = prob.model->grid();
  const auto& tg = prob.model->tg();
  if (prob.placement.w.size() != grid.num_candidates() ||
      prob.placement.sigma.size() != tg.n_T)
    throw ValidationError("placement length does not match candidate/subinterval counts");
  if (prob.z_o.values.rows() != grid.num_candidates() || prob.z_o.values.cols() != tg.n + 2)
    throw ValidationError("observation series shape mismatch");
}

double regularization(const DAProblem& prob, const Eigen::VectorXd& du) {
  const auto& model = *prob.model;
  double h2 = model.grid().h * model.grid().h;
  double l2 = h2 * du.squaredNorm();
  double h1 = h2 * du.dot(model.laplacian() * du);
  return 0.5 * prob.alpha * l2 + 0.5 * prob.theta * h1;
}

Evaluation evaluate(const DAProblem& prob, const Eigen::VectorXd& u, bool with_grad) {
  check_shapes(prob);
  const auto& model = *prob.model;
  const auto& grid = model.grid();
  const auto& tg = model.tg();
  const double tau = tg.tau;

  Evaluation ev;
  ev.y = model.solve_forward(u, prob.forcing);
  Eigen::VectorXd sr = sigma_rho_weights(tg, prob.placement.sigma);

  // Misfit at candidate nodes, weighted by w_k sigma_i rho_i(t_s). Each sensor
  // is a Dirac mass of weight 1/h^2, which keeps the observation term strong
  // enough to dominate the background regularization as the mesh refines.
  const double ih2 = 1.0 / (grid.h * grid.h);
  Eigen::MatrixXd nodal(grid.num_candidates(), tg.n + 2);
  double obs = 0.0;
  for (int c = 0; c < grid.num_candidates(); ++c) {
    int k = grid.candidate_ids[c];
    for (int s = 0; s <= tg.n + 1; ++s) {
      double misfit = ev.y(k, s) - prob.z_o.values(c, s);
      double wgt = prob.placement.w[c] * sr[s] * ih2;
      nodal(c, s) = wgt * misfit;
      if (s >= 1) obs += wgt * misfit * misfit;
    }
  }
  Eigen::VectorXd du = u - prob.u_b;
  ev.cost = 0.5 * tau * obs + regularization(prob, du);

  if (with_grad) {
    auto lin = model.linearize(ev.y);
    ev.p = model.solve_adjoint(lin, nodal);
    ev.grad = prob.alpha * du + prob.theta * (model.laplacian() * du) + ev.p.col(0);
  }
  return ev;
}

}  // namespace

double lower_cost(const DAProblem& prob, const Eigen::VectorXd& u) {
  return evaluate(prob, u, false).cost;
}

Eigen::VectorXd lower_gradient(const DAProblem& prob, const Eigen::VectorXd& u) {
  return evaluate(prob, u, true).grad;
}

LowerSolution assimilate(const DAProblem& prob, const Eigen::VectorXd& u_init,
                         const AssimilateOptions& opts) {
  const auto& model = *prob.model;
  const double h2 = model.grid().h * model.grid().h;
  auto dot = [h2](const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return h2 * a.dot(b); };

  Eigen::VectorXd x = u_init;
  Evaluation ev = evaluate(prob, x, true);
  Eigen::VectorXd g = ev.grad;

  const int ni = static_cast<int>(x.size());
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(ni, ni);

  int it = 0;
  for (; it < opts.max_iter; ++it) {
    double gnorm = std::sqrt(dot(g, g));
    if (gnorm <= opts.tol_g) break;

    Eigen::VectorXd d = -(B * g);
    double slope = dot(g, d);
    if (slope >= 0.0) {  // fall back to steepest descent
      B.setIdentity();
      d = -g;
      slope = dot(g, d);
    }

    double step = 1.0;
    Evaluation trial;
    bool accepted = false;
    for (int half = 0; half <= opts.max_halvings; ++half) {
      trial = evaluate(prob, (x + step * d).eval(), true);
      if (trial.cost <= ev.cost + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // Retry once along steepest descent before giving up on the model.
      if (!B.isIdentity(0.0)) {
        B.setIdentity();
        continue;
      }
      // Descent below round-off in the cost means the iterate is converged to
      // machine precision; only a stall with measurable slope is an error.
      if (std::abs(slope) <= 1e-10 * (1.0 + std::abs(ev.cost))) break;
      throw StalledSearchError("assimilation line search stalled", x);
    }

    Eigen::VectorXd s = step * d;
    Eigen::VectorXd g_new = trial.grad;
    Eigen::VectorXd yk = g_new - g;
    double ys = dot(yk, s);
    if (ys > 1e-12 * std::sqrt(dot(s, s)) * std::sqrt(dot(yk, yk))) {
      Eigen::MatrixXd V = Eigen::MatrixXd::Identity(ni, ni) - (h2 / ys) * (s * yk.transpose());
      B = V * B * V.transpose() + (h2 / ys) * (s * s.transpose());
    } else {
      B.setIdentity();
    }
    x += s;
    ev = std::move(trial);
    g = g_new;
  }

  LowerSolution sol;
  sol.u = std::move(x);
  sol.y = std::move(ev.y);
  sol.p = std::move(ev.p);
  sol.grad_norm = std::sqrt(dot(g, g));
  sol.iterations = it;
  return sol;
}

}  // namespace oplace
