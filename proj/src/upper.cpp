#include "oplace/upper.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <string>
#include <thread>

namespace oplace {

namespace {

// Runs fn(j) for j in [0, count); results land in caller-indexed slots, so the
// outcome is independent of the worker count.
void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int j = 0; j < count; ++j) fn(j);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int j = next++; j < count; j = next++) fn(j);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

double upper_cost(const Placement& W, const std::vector<LowerSolution>& sols,
                  const std::vector<TrainingPair>& training, const UpperConfig& cfg,
                  PenaltyMode mode) {
  if (sols.size() != training.size())
    throw ValidationError("one lower solution per training pair is required");
  const auto& model = *cfg.model;
  const double h2 = model.grid().h * model.grid().h;
  const double tau = model.tg().tau;
  double loss = 0.0;
  for (size_t j = 0; j < sols.size(); ++j) {
    const auto& y = sols[j].y;
    const auto& y_dag = training[j].y_dag;
    for (int s = 1; s < y.cols(); ++s) loss += tau * h2 * (y.col(s) - y_dag.col(s)).squaredNorm();
    loss += cfg.beta * h2 * (sols[j].u - training[j].u_dag).squaredNorm();
  }
  if (mode == PenaltyMode::Linear)
    return loss + cfg.beta_w * W.w.sum() + cfg.beta_sigma * W.sigma.sum();
  PenaltyFamily fam(cfg.eps_penalty);
  return loss + cfg.beta_w * fam.sum(W.w) + cfg.beta_sigma * fam.sum(W.sigma);
}

BilevelAdjoint solve_bilevel_adjoint(const LowerSolution& sol, const TrainingPair& pair,
                                     const Placement& W, const UpperConfig& cfg) {
  const auto& model = *cfg.model;
  const auto& grid = model.grid();
  const auto& tg = model.tg();
  const double h2 = grid.h * grid.h;
  const int ncol = tg.n + 2;

  auto lin = model.linearize(sol.y);
  Eigen::VectorXd sr = sigma_rho_weights(tg, W.sigma);
  PdeModel::EllipticSolver elliptic(model, cfg.theta, cfg.alpha);

  // zeta from a candidate tau field, then the trace of the zeta-driven part
  // of the backward solve.
  auto zeta_of = [&](const Eigen::VectorXd& tau_field) {
    return model.solve_linearized(lin, (-tau_field).eval());
  };
  const double ih2 = 1.0 / h2;
  auto eta_linear_part = [&](const Eigen::MatrixXd& zeta) {
    Eigen::MatrixXd nodal(grid.num_candidates(), ncol);
    for (int c = 0; c < grid.num_candidates(); ++c) {
      int k = grid.candidate_ids[c];
      for (int s = 0; s < ncol; ++s) nodal(c, s) = W.w[c] * sr[s] * zeta(k, s) * ih2;
    }
    AdjointCoupling coupling{&sol.p, &zeta};
    return model.solve_adjoint(lin, nodal, nullptr, &coupling);
  };
  auto apply_E = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    return cfg.alpha * v + cfg.theta * (model.laplacian() * v);
  };
  // Full operator in tau-space: E tau - trace of the zeta-driven backward solve.
  auto apply_op = [&](const Eigen::VectorXd& tau_field) -> Eigen::VectorXd {
    Eigen::MatrixXd zeta = zeta_of(tau_field);
    Eigen::MatrixXd eta = eta_linear_part(zeta);
    return apply_E(tau_field) - eta.col(0);
  };

  // Constant part: backward solve driven by the state loss only.
  Eigen::MatrixXd vol = -2.0 * (sol.y - pair.y_dag);
  Eigen::MatrixXd eta0 = model.solve_adjoint(lin, Eigen::MatrixXd(), &vol);
  Eigen::VectorXd b = eta0.col(0) - 2.0 * cfg.beta * (sol.u - pair.u_dag);

  BilevelAdjoint adj;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(grid.num_nodes());
  double b_norm = std::sqrt(h2) * b.norm();
  int applications = 0;
  if (b_norm > 0.0) {
    // Preconditioned CG on the (self-adjoint) tau-space operator, with the
    // elliptic part as preconditioner.
    Eigen::VectorXd r = b;
    Eigen::VectorXd z = elliptic.solve(r);
    Eigen::VectorXd d = z;
    double rz = h2 * r.dot(z);
    double rel = 1.0;
    while (true) {
      rel = std::sqrt(h2) * r.norm() / b_norm;
      if (rel <= cfg.adjoint_tol) break;
      if (applications >= cfg.max_adjoint_applications)
        throw AdjointSolverError("coupled adjoint solve exceeded application budget", rel);
      Eigen::VectorXd q = apply_op(d);
      ++applications;
      double dq = h2 * d.dot(q);
      if (dq <= 0.0)
        throw AdjointSolverError("coupled adjoint operator lost positivity", rel);
      double step = rz / dq;
      x += step * d;
      r -= step * q;
      z = elliptic.solve(r);
      double rz_new = h2 * r.dot(z);
      d = z + (rz_new / rz) * d;
      rz = rz_new;
    }
  }

  adj.tau = x;
  adj.zeta = zeta_of(adj.tau);
  // Final eta carries all sources: zeta terms plus the state-loss term.
  Eigen::MatrixXd nodal(grid.num_candidates(), ncol);
  for (int c = 0; c < grid.num_candidates(); ++c) {
    int k = grid.candidate_ids[c];
    for (int s = 0; s < ncol; ++s) nodal(c, s) = W.w[c] * sr[s] * adj.zeta(k, s) * ih2;
  }
  AdjointCoupling coupling{&sol.p, &adj.zeta};
  adj.eta = model.solve_adjoint(lin, nodal, &vol, &coupling);
  Eigen::VectorXd res = apply_E(x) - adj.eta.col(0) + 2.0 * cfg.beta * (sol.u - pair.u_dag);
  adj.residual = std::sqrt(h2) * res.norm() / std::max(b_norm, 1e-300);
  return adj;
}

Eigen::VectorXd upper_gradient(const Placement& W, const std::vector<LowerSolution>& sols,
                               const std::vector<BilevelAdjoint>& adjoints,
                               const std::vector<TrainingPair>& training,
                               const UpperConfig& cfg, PenaltyMode mode) {
  if (sols.size() != training.size() || adjoints.size() != training.size())
    throw ValidationError("solution/adjoint count mismatch");
  const auto& model = *cfg.model;
  const auto& grid = model.grid();
  const auto& tg = model.tg();
  const double tau = tg.tau;
  const double ih2 = 1.0 / (grid.h * grid.h);
  const int n_s = grid.num_candidates();
  const int n_T = tg.n_T;

  Eigen::VectorXd grad(n_s + n_T);
  PenaltyFamily fam(cfg.eps_penalty);
  for (int c = 0; c < n_s; ++c)
    grad[c] = cfg.beta_w * (mode == PenaltyMode::Linear ? 1.0 : fam.derivative(W.w[c]));
  for (int i = 0; i < n_T; ++i)
    grad[n_s + i] = cfg.beta_sigma * (mode == PenaltyMode::Linear ? 1.0 : fam.derivative(W.sigma[i]));

  for (size_t j = 0; j < training.size(); ++j) {
    const auto& zeta = adjoints[j].zeta;
    const auto& y = sols[j].y;
    const auto& z = training[j].z_o.values;
    for (int s = 1; s <= tg.num_steps(); ++s) {
      double t = tg.step_time(s);
      int i = std::min(static_cast<int>(t * n_T), n_T - 1);
      double rho = mollifier_value(tg, i, t);
      if (rho == 0.0) continue;
      for (int c = 0; c < n_s; ++c) {
        int k = grid.candidate_ids[c];
        double zm = ih2 * zeta(k, s) * (y(k, s) - z(c, s));
        grad[c] -= tau * W.sigma[i] * rho * zm;
        grad[n_s + i] -= tau * W.w[c] * rho * zm;
      }
    }
  }
  return grad;
}

std::vector<bool> epsilon_active_set(const Eigen::VectorXd& W, double eps_k) {
  std::vector<bool> active(W.size());
  for (int i = 0; i < W.size(); ++i) active[i] = (W[i] <= eps_k || W[i] >= 1.0 - eps_k);
  return active;
}

namespace {

Eigen::VectorXd mask_inactive(const Eigen::VectorXd& v, const std::vector<bool>& active) {
  Eigen::VectorXd r = v;
  for (int i = 0; i < v.size(); ++i)
    if (active[i]) r[i] = 0.0;
  return r;
}

Eigen::MatrixXd restricted_identity(int n, const std::vector<bool>& active) {
  Eigen::VectorXd d(n);
  for (int i = 0; i < n; ++i) d[i] = active[i] ? 0.0 : 1.0;
  return d.asDiagonal();
}

Eigen::MatrixXd restrict_matrix(Eigen::MatrixXd B, const std::vector<bool>& active) {
  for (int i = 0; i < B.rows(); ++i)
    if (active[i]) {
      B.row(i).setZero();
      B.col(i).setZero();
    }
  return B;
}

}  // namespace

Eigen::MatrixXd reduced_bfgs_update(const Eigen::MatrixXd& B, const Eigen::VectorXd& W_old,
                                    const Eigen::VectorXd& W_new, const Eigen::VectorXd& grad_old,
                                    const Eigen::VectorXd& grad_new, const std::vector<bool>& active) {
  const int n = static_cast<int>(W_old.size());
  Eigen::VectorXd s = mask_inactive(W_new - W_old, active);
  Eigen::VectorXd y = mask_inactive(grad_new - grad_old, active);
  double ys = y.dot(s);
  if (ys <= 1e-12 * s.norm() * y.norm()) return restricted_identity(n, active);
  Eigen::MatrixXd Br = restrict_matrix(B, active);
  Eigen::MatrixXd V = Eigen::MatrixXd::Identity(n, n) - (s * y.transpose()) / ys;
  return V * Br * V.transpose() + (s * s.transpose()) / ys;
}

Eigen::VectorXd search_direction(const Eigen::MatrixXd& B, const Eigen::VectorXd& grad,
                                 const std::vector<bool>& active) {
  Eigen::VectorXd d(grad.size());
  for (int i = 0; i < grad.size(); ++i) d[i] = active[i] ? -grad[i] : 0.0;
  Eigen::VectorXd gi = mask_inactive(grad, active);
  d -= mask_inactive((B * gi).eval(), active);
  return d;
}

Eigen::VectorXd clamp01(const Eigen::VectorXd& v) {
  return v.cwiseMax(0.0).cwiseMin(1.0);
}

ArmijoResult armijo_project(const std::function<double(const Eigen::VectorXd&)>& cost,
                            const Eigen::VectorXd& W, const Eigen::VectorXd& d,
                            double current_cost, double grad_norm_at_start, double gamma,
                            int max_trials) {
  if (grad_norm_at_start <= 0.0) return {0.0, W};
  double step = 1.0 / grad_norm_at_start;
  for (int trial = 0; trial < max_trials; ++trial, step *= 0.5) {
    Eigen::VectorXd W_next = clamp01(W + step * d);
    double move2 = (W_next - W).squaredNorm();
    if (move2 == 0.0) {
      // Direction is blocked by the bounds at every step length.
      if (trial == 0) return {0.0, W};
      continue;
    }
    if (cost(W_next) - current_cost <= -(gamma / step) * move2) return {step, W_next};
  }
  throw StalledSearchError("projected line search stalled", W);
}

KKTMultipliers kkt_extract(const Eigen::VectorXd& W, const Eigen::VectorXd& grad_sparsity) {
  KKTMultipliers kkt;
  kkt.lambda_a = grad_sparsity.cwiseMax(0.0);
  kkt.lambda_b = (-grad_sparsity).cwiseMax(0.0);
  double res = 0.0;
  for (int i = 0; i < W.size(); ++i) {
    res = std::max(res, std::abs(kkt.lambda_a[i] * W[i]));
    res = std::max(res, std::abs(kkt.lambda_b[i] * (W[i] - 1.0)));
  }
  kkt.complementarity_residual = res;
  return kkt;
}

namespace {

struct Stage {
  PenaltyMode mode;
  int index;
};

}  // namespace

PlacementResult optimize_placement(const std::vector<TrainingPair>& training, const UpperConfig& cfg) {
  if (training.empty()) throw ValidationError("training set is empty");
  const auto& model = *cfg.model;
  const int n_s = model.grid().num_candidates();
  const int n_T = model.tg().n_T;
  const int N = static_cast<int>(training.size());

  model.counters.reset();
  PlacementResult out;
  out.W = {Eigen::VectorXd::Ones(n_s), Eigen::VectorXd::Ones(n_T)};

  auto make_problem = [&](int j, const Placement& W) {
    DAProblem prob;
    prob.model = &model;
    prob.u_b = training[j].u_b;
    prob.z_o = training[j].z_o;
    prob.forcing = training[j].forcing;
    prob.theta = cfg.theta;
    prob.alpha = cfg.alpha;
    prob.placement = W;
    return prob;
  };

  // Initial (cold) assimilation at the all-ones placement.
  std::vector<LowerSolution> sols(N);
  parallel_for(N, cfg.workers, [&](int j) {
    sols[j] = assimilate(make_problem(j, out.W), training[j].u_b, cfg.lower);
  });
  for (const auto& s : sols) out.inner_da_iterations = std::max(out.inner_da_iterations, s.iterations);

  // Warm-started re-assimilation at a trial placement.
  auto resolve = [&](const Placement& W, const std::vector<LowerSolution>& warm) {
    std::vector<LowerSolution> next(N);
    parallel_for(N, cfg.workers, [&](int j) {
      next[j] = assimilate(make_problem(j, W), warm[j].u, cfg.lower);
    });
    for (const auto& s : next)
      out.inner_da_iterations = std::max(out.inner_da_iterations, s.iterations);
    return next;
  };
  Eigen::VectorXd Wv = out.W.flatten();
  Eigen::VectorXd grad;
  bool converged = false;
  double cost_now = 0.0;

  for (Stage stage : {Stage{PenaltyMode::Linear, 1}, Stage{PenaltyMode::Sparsity, 2}}) {
    auto grad_at = [&](const Placement& W, const std::vector<LowerSolution>& s) {
      std::vector<BilevelAdjoint> adj(N);
      parallel_for(N, cfg.workers, [&](int j) {
        adj[j] = solve_bilevel_adjoint(s[j], training[j], W, cfg);
      });
      return upper_gradient(W, s, adj, training, cfg, stage.mode);
    };

    cost_now = upper_cost(out.W, sols, training, cfg, stage.mode);
    if (stage.index == 1) out.cost_initial = cost_now;
    grad = grad_at(out.W, sols);
    double g0norm = grad.norm();

    Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n_s + n_T, n_s + n_T);
    Eigen::VectorXd W_prev, grad_prev;
    converged = false;

    for (int k = 0; k < cfg.max_iter; ++k) {
      double pg_norm = (Wv - clamp01(Wv - grad)).norm();
      if (pg_norm <= cfg.tol) {
        converged = true;
        break;
      }
      double eps_k = std::min(cfg.eps_active_max, pg_norm);
      auto active = epsilon_active_set(Wv, eps_k);
      if (W_prev.size() > 0)
        B = reduced_bfgs_update(B, W_prev, Wv, grad_prev, grad, active);
      Eigen::VectorXd d = search_direction(B, grad, active);

      std::vector<LowerSolution> trial_sols;
      auto trial_cost = [&](const Eigen::VectorXd& Wt) {
        Placement Wp = Placement::unflatten(Wt, n_s, n_T);
        trial_sols = resolve(Wp, sols);
        return upper_cost(Wp, trial_sols, training, cfg, stage.mode);
      };

      ArmijoResult ls;
      try {
        ls = armijo_project(trial_cost, Wv, d, cost_now, g0norm, cfg.gamma_armijo,
                            cfg.max_line_trials);
      } catch (const StalledSearchError&) {
        // Retry once along the projected gradient before giving up.
        B = restricted_identity(n_s + n_T, active);
        d = search_direction(B, grad, active);
        try {
          ls = armijo_project(trial_cost, Wv, d, cost_now, g0norm, cfg.gamma_armijo,
                              cfg.max_line_trials);
        } catch (const StalledSearchError&) {
          if (stage.index == 2) {
            converged = false;
            break;  // keep the last iterate
          }
          throw;
        }
      }
      if (ls.step == 0.0) {
        converged = true;  // every feasible step along d is blocked
        break;
      }

      W_prev = Wv;
      grad_prev = grad;
      Wv = ls.W_next;
      out.W = Placement::unflatten(Wv, n_s, n_T);
      sols = std::move(trial_sols);
      cost_now = upper_cost(out.W, sols, training, cfg, stage.mode);
      grad = grad_at(out.W, sols);
      ++out.outer_iterations;

      HistoryRow row;
      row.stage = stage.index;
      row.iteration = k;
      row.cost = cost_now;
      row.norm_w = out.W.w.sum();
      row.norm_sigma = out.W.sigma.sum();
      row.pg_norm = (Wv - clamp01(Wv - grad)).norm();
      row.active_count = static_cast<int>(std::count(active.begin(), active.end(), true));
      row.step = ls.step;
      out.history.push_back(row);
    }
  }

  out.converged = converged;
  out.cost_final = cost_now;
  out.kkt = kkt_extract(Wv, grad);
  out.sols = std::move(sols);
  out.parabolic_solves = model.counters.parabolic;
  out.elliptic_solves = model.counters.elliptic;
  return out;
}

int band_label_w(double x) {
  if (x <= 0.2) return 0;
  if (x <= 0.8) return 2;
  if (x < 1.0 - 1e-9) return 3;
  return 1;
}

int band_label_sigma(double x) {
  if (x < 0.25) return 0;
  if (x < 0.5) return 2;
  if (x < 0.75) return 3;
  return 1;
}

Placement classify_and_binarize(const Placement& W,
                                const std::function<double(const Placement&)>& binary_cost,
                                bool threshold_fallback) {
  Placement out = W;
  std::vector<std::pair<bool, int>> ambiguous;  // (is_sigma, index)
  for (int c = 0; c < W.w.size(); ++c) {
    int label = band_label_w(W.w[c]);
    if (label == 2)
      ambiguous.emplace_back(false, c);
    else
      out.w[c] = (label == 0) ? 0.0 : 1.0;
  }
  for (int i = 0; i < W.sigma.size(); ++i) {
    int label = band_label_sigma(W.sigma[i]);
    if (label == 2 || label == 3)
      ambiguous.emplace_back(true, i);
    else
      out.sigma[i] = (label == 0) ? 0.0 : 1.0;
  }
  if (ambiguous.empty()) return out;
  if (ambiguous.size() > 12) {
    if (!threshold_fallback)
      throw TooAmbiguousError("too many middle-band entries for exhaustive search: " +
                              std::to_string(ambiguous.size()));
    for (auto [is_sigma, idx] : ambiguous) {
      double v = is_sigma ? W.sigma[idx] : W.w[idx];
      (is_sigma ? out.sigma[idx] : out.w[idx]) = (v >= 0.5) ? 1.0 : 0.0;
    }
    return out;
  }
  double best_cost = std::numeric_limits<double>::infinity();
  Placement best = out;
  for (std::uint32_t bits = 0; bits < (1u << ambiguous.size()); ++bits) {
    Placement cand = out;
    for (size_t a = 0; a < ambiguous.size(); ++a) {
      double v = (bits >> a) & 1u ? 1.0 : 0.0;
      auto [is_sigma, idx] = ambiguous[a];
      (is_sigma ? cand.sigma[idx] : cand.w[idx]) = v;
    }
    double c = binary_cost(cand);
    if (c < best_cost) {
      best_cost = c;
      best = cand;
    }
  }
  return best;
}

}  // namespace oplace
