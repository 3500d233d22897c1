#include <CLI11.hpp>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <random>

#include "oplace/harness.hpp"

namespace {

oplace::ExperimentConfig assemble(const std::string& config_path,
                                  const std::vector<std::string>& overrides,
                                  const std::string& experiment_id = "") {
  oplace::ExperimentConfig cfg;
  if (const char* env = std::getenv("OPLACE_WORKERS"))
    oplace::apply_override(cfg, std::string("workers=") + env);
  if (!experiment_id.empty()) cfg = oplace::preset_config(experiment_id, cfg);
  if (!config_path.empty()) {
    oplace::ExperimentConfig from_file = oplace::load_config(config_path);
    cfg = from_file;
    if (!experiment_id.empty()) {
      // The file supplies the base; the experiment id still fixes its preset.
      int workers = cfg.workers;
      cfg = oplace::preset_config(experiment_id, cfg);
      cfg.workers = workers;
    }
  }
  for (const auto& ov : overrides) oplace::apply_override(cfg, ov);
  oplace::validate_config(cfg);
  return cfg;
}

int run_forward(const oplace::ExperimentConfig& cfg) {
  oplace::Instance inst = oplace::build_instance(cfg);
  auto training = oplace::build_training_set(cfg, *inst.model);
  const auto& y = training[0].y_dag;
  std::cout << std::setprecision(12);
  std::cout << "nodes " << inst.grid.num_nodes() << " steps " << inst.tg.num_steps() << "\n";
  std::cout << "state_norm " << oplace::space_time_norm(*inst.model, y) << "\n";
  std::cout << "final_max " << y.col(y.cols() - 1).cwiseAbs().maxCoeff() << "\n";
  return 0;
}

int run_assimilate(const oplace::ExperimentConfig& cfg) {
  oplace::Instance inst = oplace::build_instance(cfg);
  auto training = oplace::build_training_set(cfg, *inst.model);
  oplace::DAProblem prob;
  prob.model = inst.model.get();
  prob.u_b = training[0].u_b;
  prob.z_o = training[0].z_o;
  prob.forcing = training[0].forcing;
  prob.theta = cfg.theta;
  prob.alpha = cfg.alpha;
  prob.placement = {Eigen::VectorXd::Ones(inst.grid.num_candidates()),
                    Eigen::VectorXd::Ones(inst.tg.n_T)};
  auto sol = oplace::assimilate(prob, training[0].u_b);
  double h = inst.grid.h;
  double err = h * (sol.u - training[0].u_dag).norm();
  std::cout << std::setprecision(12);
  std::cout << "iterations " << sol.iterations << "\n";
  std::cout << "grad_norm " << sol.grad_norm << "\n";
  std::cout << "u_error " << err << "\n";
  return 0;
}

int run_place(const oplace::ExperimentConfig& cfg, const std::string& out_dir) {
  oplace::Instance inst = oplace::build_instance(cfg);
  auto training = oplace::build_training_set(cfg, *inst.model);
  oplace::UpperConfig ucfg;
  ucfg.model = inst.model.get();
  ucfg.theta = cfg.theta;
  ucfg.alpha = cfg.alpha;
  ucfg.beta = cfg.beta;
  ucfg.beta_w = cfg.beta_w;
  ucfg.beta_sigma = cfg.beta_sigma;
  ucfg.eps_penalty = cfg.eps_penalty;
  ucfg.tol = cfg.tol;
  ucfg.max_iter = cfg.max_iter;
  ucfg.workers = cfg.workers;
  auto result = oplace::optimize_placement(training, ucfg);
  std::cout << std::setprecision(12);
  std::cout << "J0 " << result.cost_initial << "\n";
  std::cout << "Jend " << result.cost_final << "\n";
  std::cout << "norm_w " << result.W.w.sum() << "\n";
  std::cout << "norm_sigma " << result.W.sigma.sum() << "\n";
  std::cout << "iter " << result.outer_iterations << "\n";
  std::cout << "iter_da " << result.inner_da_iterations << "\n";
  std::cout << "pde_solved " << result.parabolic_solves << "\n";
  std::cout << "converged " << (result.converged ? 1 : 0) << "\n";
  if (!out_dir.empty()) {
    oplace::RunReport rep;
    rep.id = "place";
    rep.sweep_name = "beta_w";
    rep.grid = inst.grid;
    rep.tg = inst.tg;
    oplace::ReportRow row;
    row.sweep_value = cfg.beta_w;
    row.sd = cfg.sd;
    row.relaxed = result.W;
    row.binary = result.W;
    row.ok = true;
    row.message = "ok";
    rep.rows.push_back(row);
    oplace::export_report(rep, out_dir);
  }
  return 0;
}

int run_experiment_cmd(const std::string& id, const oplace::ExperimentConfig& cfg,
                       const std::string& out_dir) {
  oplace::RunReport rep = oplace::run_experiment(id, cfg);
  oplace::export_report(rep, out_dir.empty() ? ("out_exp" + id) : out_dir);
  int failures = 0;
  for (const auto& r : rep.rows) {
    std::cout << rep.sweep_name << "=" << r.sweep_value << " sd=" << r.sd
              << (r.ok ? " ok" : " FAILED: " + r.message) << "\n";
    if (!r.ok) ++failures;
  }
  std::cout << "rows " << rep.rows.size() << " failed " << failures << "\n";
  return 0;
}

int run_check_gradients(const oplace::ExperimentConfig& base) {
  std::cout << std::setprecision(6);

  oplace::ExperimentConfig cfg = base;
  cfg.m = 10;
  cfg.n = 12;
  cfg.preset = "single";
  cfg.pairs = 1;
  cfg.candidates = "all";
  oplace::Instance inst = oplace::build_instance(cfg);
  auto training = oplace::build_training_set(cfg, *inst.model);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.2, 0.8);
  oplace::DAProblem prob;
  prob.model = inst.model.get();
  prob.u_b = training[0].u_b;
  prob.z_o = training[0].z_o;
  prob.forcing = training[0].forcing;
  prob.theta = cfg.theta;
  prob.alpha = cfg.alpha;
  prob.placement.w = Eigen::VectorXd::NullaryExpr(inst.grid.num_candidates(),
                                                  [&](Eigen::Index) { return unif(rng); });
  prob.placement.sigma = Eigen::VectorXd::NullaryExpr(inst.tg.n_T,
                                                      [&](Eigen::Index) { return unif(rng); });

  Eigen::VectorXd u = 0.5 * training[0].u_dag;
  Eigen::VectorXd g = oplace::lower_gradient(prob, u);
  const double delta = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < inst.grid.num_nodes(); k += 7) {
    Eigen::VectorXd up = u, um = u;
    up[k] += delta;
    um[k] -= delta;
    double h2 = inst.grid.h * inst.grid.h;
    double fd = (oplace::lower_cost(prob, up) - oplace::lower_cost(prob, um)) / (2 * delta * h2);
    worst = std::max(worst, std::abs(fd - g[k]) / std::max(1.0, std::abs(g[k])));
  }
  std::cout << "lower_gradient_rel_error " << worst << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel optimal sensor placement for variational data assimilation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, experiment_id;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "configuration file (key=value lines)");
  app.add_option("-o,--out", out_dir, "output directory for exported data");
  app.add_option("--set", overrides, "override a config key, e.g. --set beta_w=0.001");

  auto* fwd = app.add_subcommand("forward", "solve the state equation for the training preset");
  auto* assim = app.add_subcommand("assimilate", "run one data assimilation at the all-ones placement");
  auto* place = app.add_subcommand("place", "optimize the placement for the configured penalties");
  auto* exp = app.add_subcommand("experiment", "run a preset sweep study");
  exp->add_option("id", experiment_id, "experiment id: 1a, 1b, 2, 3, 4")->required();
  auto* check = app.add_subcommand("check-gradients", "finite-difference gradient verification");
  auto* coeffs = app.add_subcommand("coeffs", "print the cubic bridge coefficients");
  double coeffs_eps = 0.5;
  coeffs->add_option("--eps", coeffs_eps, "penalty breakpoint parameter");

  CLI11_PARSE(app, argc, argv);

  try {
    if (coeffs->parsed()) {
      Eigen::Vector4d c = oplace::pi_coefficients(coeffs_eps);
      std::cout << std::setprecision(12) << c[0] << " " << c[1] << " " << c[2] << " " << c[3]
                << "\n";
      return 0;
    }
    if (exp->parsed()) {
      oplace::ExperimentConfig cfg = assemble(config_path, overrides, experiment_id);
      return run_experiment_cmd(experiment_id, cfg, out_dir);
    }
    oplace::ExperimentConfig cfg = assemble(config_path, overrides);
    if (fwd->parsed()) return run_forward(cfg);
    if (assim->parsed()) return run_assimilate(cfg);
    if (place->parsed()) return run_place(cfg, out_dir);
    if (check->parsed()) return run_check_gradients(cfg);
  } catch (const oplace::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const oplace::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
