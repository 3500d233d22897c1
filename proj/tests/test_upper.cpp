#include <doctest.h>

#include <cmath>
#include <random>

#include "oplace/harness.hpp"
#include "oplace/upper.hpp"

using namespace oplace;

namespace {

struct Setup {
  Instance inst;
  std::vector<TrainingPair> training;
  UpperConfig ucfg;
};

Setup make_setup(int m, int n, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.m = m;
  cfg.n = n;
  cfg.sd = 0.0;
  cfg.seed = seed;
  Setup s{build_instance(cfg), {}, {}};
  s.training = build_training_set(cfg, *s.inst.model);
  s.ucfg.model = s.inst.model.get();
  s.ucfg.theta = cfg.theta;
  s.ucfg.alpha = cfg.alpha;
  s.ucfg.beta = 0.05;
  s.ucfg.beta_w = 1e-3;
  s.ucfg.beta_sigma = 1e-3;
  s.ucfg.eps_penalty = 0.25;
  return s;
}

LowerSolution solve_pair(const Setup& s, const Placement& W, const AssimilateOptions& opts = {}) {
  DAProblem prob;
  prob.model = s.inst.model.get();
  prob.u_b = s.training[0].u_b;
  prob.z_o = s.training[0].z_o;
  prob.forcing = s.training[0].forcing;
  prob.theta = s.ucfg.theta;
  prob.alpha = s.ucfg.alpha;
  prob.placement = W;
  return assimilate(prob, s.training[0].u_b, opts);
}

}  // namespace

TEST_CASE("zero time selection leaves only the penalty gradient") {
  Setup s = make_setup(5, 3, 2);
  Placement W{Eigen::VectorXd::Constant(s.inst.grid.num_candidates(), 0.9),
              Eigen::VectorXd::Zero(s.inst.tg.n_T)};
  LowerSolution sol = solve_pair(s, W);
  BilevelAdjoint adj = solve_bilevel_adjoint(sol, s.training[0], W, s.ucfg);
  Eigen::VectorXd g = upper_gradient(W, {sol}, {adj}, s.training, s.ucfg, PenaltyMode::Linear);
  for (int c = 0; c < s.inst.grid.num_candidates(); ++c) CHECK(g[c] == s.ucfg.beta_w);
}

TEST_CASE("upper gradient matches end-to-end finite differences") {
  Setup s = make_setup(4, 2, 6);
  const int n_s = s.inst.grid.num_candidates();
  const int n_T = s.inst.tg.n_T;

  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> box(0.3, 0.7);
  Placement W{Eigen::VectorXd::NullaryExpr(n_s, [&](Eigen::Index) { return box(rng); }),
              Eigen::VectorXd::NullaryExpr(n_T, [&](Eigen::Index) { return box(rng); })};

  AssimilateOptions tight{1e-11, 5000, 60};
  auto cost_at = [&](const Placement& Wp, PenaltyMode mode) {
    LowerSolution sol = solve_pair(s, Wp, tight);
    return upper_cost(Wp, {sol}, s.training, s.ucfg, mode);
  };

  for (PenaltyMode mode : {PenaltyMode::Linear, PenaltyMode::Sparsity}) {
    LowerSolution sol = solve_pair(s, W, tight);
    BilevelAdjoint adj = solve_bilevel_adjoint(sol, s.training[0], W, s.ucfg);
    CHECK(adj.residual <= 1e-6);
    Eigen::VectorXd g = upper_gradient(W, {sol}, {adj}, s.training, s.ucfg, mode);

    const double d = 1e-5;
    Eigen::VectorXd flat = W.flatten();
    Eigen::VectorXd fd(flat.size());
    for (int i = 0; i < flat.size(); ++i) {
      Eigen::VectorXd up = flat, um = flat;
      up[i] += d;
      um[i] -= d;
      fd[i] = (cost_at(Placement::unflatten(up, n_s, n_T), mode) -
               cost_at(Placement::unflatten(um, n_s, n_T), mode)) /
              (2 * d);
    }
    CHECK((g - fd).norm() <= 1e-3 * fd.norm());
  }
}

TEST_CASE("epsilon active set flags near-bound entries") {
  Eigen::VectorXd W(5);
  W << 0.0, 0.05, 0.5, 0.93, 1.0;
  auto active = epsilon_active_set(W, 0.1);
  CHECK(active == std::vector<bool>{true, true, false, true, true});
  auto none = epsilon_active_set(W, 0.01);
  CHECK(none == std::vector<bool>{true, false, false, false, true});
}

TEST_CASE("reduced BFGS update keeps the secant property on the inactive set") {
  const int n = 6;
  std::mt19937_64 rng(41);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
  std::vector<bool> active = {true, false, false, false, false, true};

  Eigen::VectorXd W0(n), W1(n), g0(n), g1(n);
  for (int i = 0; i < n; ++i) {
    W0[i] = dist(rng);
    g0[i] = dist(rng);
  }
  // A definite curvature pair: y = 2 s on the inactive coordinates.
  Eigen::VectorXd step(n);
  for (int i = 0; i < n; ++i) step[i] = active[i] ? 0.0 : dist(rng);
  W1 = W0 + step;
  g1 = g0 + 2.0 * step;

  Eigen::MatrixXd Bn = reduced_bfgs_update(B, W0, W1, g0, g1, active);
  CHECK((Bn - Bn.transpose()).norm() <= 1e-12);
  // Inverse-Hessian secant: B y = s with y masked to the inactive set.
  Eigen::VectorXd y = 2.0 * step;
  CHECK((Bn * y - step).norm() <= 1e-10 * step.norm());
  for (int i = 0; i < n; ++i)
    if (active[i]) {
      CHECK(Bn.row(i).norm() == 0.0);
      CHECK(Bn.col(i).norm() == 0.0);
    }

  // A flat pair (no curvature) resets to the restricted identity.
  Eigen::MatrixXd Bf = reduced_bfgs_update(B, W0, W1, g0, g0, active);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      CHECK(Bf(i, j) == ((i == j && !active[i]) ? 1.0 : 0.0));
}

TEST_CASE("search direction is steepest descent on the active set") {
  Eigen::MatrixXd B = 2.0 * Eigen::MatrixXd::Identity(3, 3);
  Eigen::VectorXd g(3);
  g << 1.0, -2.0, 0.5;
  std::vector<bool> active = {true, false, false};
  Eigen::VectorXd d = search_direction(B, g, active);
  CHECK(d[0] == -1.0);
  CHECK(d[1] == 4.0);
  CHECK(d[2] == -1.0);
}

TEST_CASE("projected line search on a quadratic") {
  Eigen::VectorXd W(2);
  W << 0.5, 0.9;
  auto cost = [](const Eigen::VectorXd& v) { return (v.array() - 0.2).square().sum(); };
  Eigen::VectorXd g(2);
  g << 2.0 * (W[0] - 0.2), 2.0 * (W[1] - 0.2);
  ArmijoResult r = armijo_project(cost, W, (-g).eval(), cost(W), g.norm(), 1e-4);
  CHECK(r.step > 0.0);
  CHECK(cost(r.W_next) < cost(W));
  CHECK(r.W_next.minCoeff() >= 0.0);
  CHECK(r.W_next.maxCoeff() <= 1.0);

  // A direction blocked by the box returns the zero step.
  Eigen::VectorXd at_bound(2);
  at_bound << 1.0, 1.0;
  Eigen::VectorXd outward(2);
  outward << 1.0, 1.0;
  ArmijoResult blocked = armijo_project(cost, at_bound, outward, cost(at_bound), 1.0, 1e-4);
  CHECK(blocked.step == 0.0);
  CHECK(blocked.W_next == at_bound);

  // An ascent direction exhausts the trials.
  Eigen::VectorXd mid(2);
  mid << 0.5, 0.5;
  CHECK_THROWS_AS(armijo_project(cost, mid, g, cost(mid), g.norm(), 1e-4, 10), StalledSearchError);
}

TEST_CASE("KKT extraction splits the gradient by sign") {
  Eigen::VectorXd W(4), g(4);
  W << 0.0, 1.0, 0.3, 1.0;
  g << 0.7, -0.2, 0.0, 0.4;
  KKTMultipliers kkt = kkt_extract(W, g);
  CHECK(kkt.lambda_a.minCoeff() >= 0.0);
  CHECK(kkt.lambda_b.minCoeff() >= 0.0);
  CHECK(kkt.lambda_a[0] == 0.7);
  CHECK(kkt.lambda_b[1] == 0.2);
  // Residual is the worst complementarity violation: lambda_a[3]*W[3] = 0.4.
  CHECK(kkt.complementarity_residual == doctest::Approx(0.4));

  Eigen::VectorXd clean(2), gc(2);
  clean << 0.0, 1.0;
  gc << 0.5, -0.5;
  CHECK(kkt_extract(clean, gc).complementarity_residual == 0.0);
}

TEST_CASE("band labels follow the reporting intervals") {
  CHECK(band_label_w(0.0) == 0);
  CHECK(band_label_w(0.2) == 0);
  CHECK(band_label_w(0.5) == 2);
  CHECK(band_label_w(0.9) == 3);
  CHECK(band_label_w(1.0) == 1);
  CHECK(band_label_sigma(0.1) == 0);
  CHECK(band_label_sigma(0.3) == 2);
  CHECK(band_label_sigma(0.6) == 3);
  CHECK(band_label_sigma(0.8) == 1);
}

TEST_CASE("binarization resolves the middle band by exhaustive search") {
  Placement W{Eigen::VectorXd(4), Eigen::VectorXd(3)};
  W.w << 0.05, 0.95, 0.5, 1.0;
  W.sigma << 0.1, 0.9, 1.0;
  int calls = 0;
  // Prefer switching the ambiguous sensor off.
  auto cost = [&](const Placement& cand) {
    ++calls;
    return cand.w[2] == 0.0 ? 1.0 : 2.0;
  };
  Placement out = classify_and_binarize(W, cost);
  CHECK(calls == 2);
  CHECK(out.w[0] == 0.0);
  CHECK(out.w[1] == 1.0);
  CHECK(out.w[2] == 0.0);
  CHECK(out.w[3] == 1.0);
  CHECK(out.sigma[0] == 0.0);
  CHECK(out.sigma[1] == 1.0);
  CHECK(out.sigma[2] == 1.0);
}

TEST_CASE("binarization falls back to thresholding when too ambiguous") {
  Placement W{Eigen::VectorXd::Constant(13, 0.6), Eigen::VectorXd::Ones(2)};
  auto cost = [](const Placement&) { return 0.0; };
  CHECK_THROWS_AS(classify_and_binarize(W, cost), TooAmbiguousError);
  Placement out = classify_and_binarize(W, cost, true);
  CHECK(out.w == Eigen::VectorXd::Ones(13));
  Placement W2{Eigen::VectorXd::Constant(13, 0.4), Eigen::VectorXd::Ones(2)};
  CHECK(classify_and_binarize(W2, cost, true).w == Eigen::VectorXd::Zero(13));
}

TEST_CASE("placement optimization on a small instance") {
  Setup s = make_setup(4, 2, 8);
  s.ucfg.beta_w = 1.0;  // penalty dominates: everything switches off
  s.ucfg.beta_sigma = 0.0;
  s.ucfg.tol = 1e-3;
  s.ucfg.max_iter = 40;
  PlacementResult r = optimize_placement(s.training, s.ucfg);
  CHECK(r.W.w.minCoeff() >= 0.0);
  CHECK(r.W.w.maxCoeff() <= 1.0);
  CHECK(r.W.w.sum() == doctest::Approx(0.0));
  CHECK(r.converged);
  CHECK(r.kkt.lambda_a.minCoeff() >= 0.0);
  CHECK(r.kkt.lambda_b.minCoeff() >= 0.0);
  CHECK(r.kkt.complementarity_residual <= 1e-6);
  for (size_t i = 1; i < r.history.size(); ++i)
    if (r.history[i].stage == r.history[i - 1].stage)
      CHECK(r.history[i].cost < r.history[i - 1].cost);
  CHECK(r.parabolic_solves > 0);
}

TEST_CASE("placement optimization is deterministic and worker independent") {
  ExperimentConfig cfg;
  cfg.m = 4;
  cfg.n = 2;
  cfg.sd = 0.001;
  cfg.preset = "common-u-multi-forcing";
  cfg.pairs = 3;
  Instance inst = build_instance(cfg);
  auto training = build_training_set(cfg, *inst.model);
  UpperConfig ucfg;
  ucfg.model = inst.model.get();
  ucfg.beta_w = 0.5;
  ucfg.tol = 1e-3;
  ucfg.max_iter = 15;

  PlacementResult a = optimize_placement(training, ucfg);
  ucfg.workers = 3;
  PlacementResult b = optimize_placement(training, ucfg);
  CHECK(a.W.w == b.W.w);
  CHECK(a.W.sigma == b.W.sigma);
  CHECK(a.cost_final == b.cost_final);
  CHECK(a.outer_iterations == b.outer_iterations);
}
