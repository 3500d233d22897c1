#include "oplace/harness.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace oplace {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<double> parse_list(const std::string& text, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      double v = std::stod(item, &used);
      while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("bad numeric value '" + item + "' in list for key '" + key + "'");
    }
  }
  if (out.empty()) throw ValidationError("empty list for key '" + key + "'");
  return out;
}

double parse_double(const std::string& text, const std::string& key) {
  try {
    size_t used = 0;
    double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("bad numeric value '" + text + "' for key '" + key + "'");
  }
}

long parse_long(const std::string& text, const std::string& key) {
  try {
    size_t used = 0;
    long v = std::stol(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("bad integer value '" + text + "' for key '" + key + "'");
  }
}

void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "m") cfg.m = static_cast<int>(parse_long(value, key));
  else if (key == "n") cfg.n = static_cast<int>(parse_long(value, key));
  else if (key == "eps_reg") cfg.eps_reg = parse_double(value, key);
  else if (key == "theta") cfg.theta = parse_double(value, key);
  else if (key == "alpha") cfg.alpha = parse_double(value, key);
  else if (key == "beta") cfg.beta = parse_double(value, key);
  else if (key == "beta_w") cfg.beta_w = parse_double(value, key);
  else if (key == "beta_sigma") cfg.beta_sigma = parse_double(value, key);
  else if (key == "eps_penalty") cfg.eps_penalty = parse_double(value, key);
  else if (key == "sd") cfg.sd = parse_double(value, key);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_long(value, key));
  else if (key == "preset") cfg.preset = value;
  else if (key == "pairs") cfg.pairs = static_cast<int>(parse_long(value, key));
  else if (key == "jump") cfg.jump = (value == "1" || value == "true");
  else if (key == "candidates") cfg.candidates = value;
  else if (key == "tol") cfg.tol = parse_double(value, key);
  else if (key == "max_iter") cfg.max_iter = static_cast<int>(parse_long(value, key));
  else if (key == "workers") cfg.workers = static_cast<int>(parse_long(value, key));
  else if (key == "sweep_beta_w") cfg.sweep_beta_w = parse_list(value, key);
  else if (key == "sweep_beta_sigma") cfg.sweep_beta_sigma = parse_list(value, key);
  else if (key == "sweep_sd") cfg.sweep_sd = parse_list(value, key);
  else throw ValidationError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  ExperimentConfig cfg;
  if (const char* env = std::getenv("OPLACE_WORKERS"))
    cfg.workers = static_cast<int>(parse_long(env, "OPLACE_WORKERS"));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    size_t eq = body.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    try {
      set_key(cfg, key, value);
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_config(cfg);
  return cfg;
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ValidationError("override must look like key=value: " + assignment);
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.m < 3) throw ValidationError("m must be at least 3");
  if (cfg.n < 1) throw ValidationError("n must be at least 1");
  if (cfg.eps_reg <= 0.0) throw ValidationError("eps_reg must be positive");
  if (cfg.theta <= 0.0 || cfg.alpha <= 0.0)
    throw ValidationError("theta and alpha must be positive");
  if (cfg.beta < 0.0) throw ValidationError("beta must be nonnegative");
  if (cfg.beta_w < 0.0) throw ValidationError("beta_w must be nonnegative");
  if (cfg.beta_sigma < 0.0) throw ValidationError("beta_sigma must be nonnegative");
  if (!(cfg.eps_penalty > 0.0 && cfg.eps_penalty <= 0.5))
    throw ValidationError("eps_penalty must lie in (0, 1/2]");
  if (cfg.sd < 0.0) throw ValidationError("sd must be nonnegative");
  if (cfg.preset != "single" && cfg.preset != "nine-variant" &&
      cfg.preset != "common-u-multi-forcing")
    throw ValidationError("unknown preset '" + cfg.preset + "'");
  if (cfg.preset == "single" && cfg.pairs != 1)
    throw ValidationError("preset 'single' requires pairs=1");
  if (cfg.preset == "nine-variant" && cfg.pairs != 9)
    throw ValidationError("preset 'nine-variant' requires pairs=9");
  if (cfg.pairs < 1) throw ValidationError("pairs must be at least 1");
  if (cfg.candidates != "all" && cfg.candidates != "restricted")
    throw ValidationError("candidates must be 'all' or 'restricted'");
  if (cfg.tol <= 0.0) throw ValidationError("tol must be positive");
  if (cfg.max_iter < 1) throw ValidationError("max_iter must be at least 1");
  if (cfg.workers < 1) throw ValidationError("workers must be at least 1");
  for (double v : cfg.sweep_beta_w)
    if (v < 0.0) throw ValidationError("sweep_beta_w entries must be nonnegative");
  for (double v : cfg.sweep_beta_sigma)
    if (v < 0.0) throw ValidationError("sweep_beta_sigma entries must be nonnegative");
  for (double v : cfg.sweep_sd)
    if (v < 0.0) throw ValidationError("sweep_sd entries must be nonnegative");
  if (cfg.sweep_beta_w.empty() || cfg.sweep_beta_sigma.empty() || cfg.sweep_sd.empty())
    throw ValidationError("sweep lists must be nonempty");
}

ExperimentConfig preset_config(const std::string& id, const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  if (id == "1a") {
    cfg.m = 20;
    cfg.theta = 20.0;
    cfg.beta = 0.09;
    cfg.beta_sigma = 0.0;
    cfg.eps_penalty = 0.5;
    cfg.sd = 0.0;
    cfg.preset = "single";
    cfg.pairs = 1;
    cfg.candidates = "all";
    cfg.tol = 1e-3;
  } else if (id == "1b") {
    cfg.m = 10;
    cfg.theta = 0.1;
    cfg.beta = 0.1;
    cfg.beta_w = 0.0001;
    cfg.eps_penalty = 0.125;
    cfg.sd = 0.0;
    cfg.preset = "single";
    cfg.pairs = 1;
    cfg.candidates = "all";
    cfg.tol = 1e-3;
  } else if (id == "2") {
    cfg.m = 10;
    cfg.theta = 0.01;
    cfg.beta = 0.0;
    cfg.beta_sigma = 0.0;
    cfg.eps_penalty = 0.125;
    cfg.sd = 0.0;
    cfg.preset = "single";
    cfg.pairs = 1;
    cfg.candidates = "restricted";
    cfg.tol = 1e-3;
    cfg.sweep_beta_w = {1e-5, 3e-5, 4e-5, 5e-5, 6e-5, 8e-5, 9.2e-5, 1.2e-4, 2e-4};
  } else if (id == "3") {
    cfg.m = 20;
    cfg.theta = 20.0;
    cfg.beta = 0.001;
    cfg.beta_sigma = 0.001;
    cfg.eps_penalty = 0.125;
    cfg.sd = 0.0;
    cfg.preset = "nine-variant";
    cfg.pairs = 9;
    cfg.candidates = "all";
    cfg.tol = 1e-3;
    cfg.sweep_beta_w = {0.0001, 0.001, 0.002, 0.004, 0.006, 0.008, 0.009, 0.010,
                        0.012,  0.014, 0.015, 0.016, 0.017, 0.018, 0.02};
  } else if (id == "4") {
    cfg.m = 20;
    cfg.theta = 0.01;
    cfg.beta = 0.0;
    cfg.beta_sigma = 1e-6;
    cfg.eps_penalty = 0.125;
    cfg.preset = "common-u-multi-forcing";
    cfg.pairs = 3;
    cfg.candidates = "all";
    cfg.tol = 1e-3;
    cfg.max_iter = 10;
    cfg.sweep_beta_w = {0.01, 0.05, 0.1};
    cfg.sweep_sd = {0.001, 0.01};
  } else {
    throw ValidationError("unknown experiment id '" + id + "'");
  }
  return cfg;
}

Instance build_instance(const ExperimentConfig& cfg) {
  validate_config(cfg);
  Instance inst;
  if (cfg.candidates == "restricted") {
    std::vector<Eigen::Vector2d> points = {{0.2, 0.2}, {0.5, 0.4}, {0.7, 0.3}, {0.8, 0.0},
                                           {0.8, 1.0}, {0.8, 0.6}, {0.4, 0.9}, {0.3, 0.8}};
    inst.grid = build_spatial_grid(cfg.m, points);
  } else {
    inst.grid = build_spatial_grid(cfg.m);
  }
  inst.tg = build_time_grid(cfg.n);
  inst.model = std::make_unique<PdeModel>(inst.grid, inst.tg, Nonlinearity{cfg.eps_reg, true});
  return inst;
}

Eigen::MatrixXd default_forcing(const PdeModel& model, double scale) {
  const auto& grid = model.grid();
  const auto& tg = model.tg();
  Eigen::MatrixXd f(grid.num_nodes(), tg.n + 2);
  for (int k = 0; k < grid.num_nodes(); ++k) {
    double sx = std::sin(kPi * grid.node_x(k));
    for (int s = 0; s < f.cols(); ++s) f(k, s) = scale * (tg.T() - tg.step_time(s)) * sx;
  }
  return f;
}

Eigen::VectorXd reference_initial_condition(const SpatialGrid& grid, double ax, double ay,
                                            double jump) {
  Eigen::VectorXd u(grid.num_nodes());
  for (int k = 0; k < grid.num_nodes(); ++k) {
    double x = grid.node_x(k), y = grid.node_y(k);
    u[k] = std::sin(2.0 * kPi * (x - ax)) * std::sin(2.0 * kPi * (y - ay));
    if (jump != 0.0 && x > 0.5) u[k] += jump;
  }
  return u;
}

std::vector<TrainingPair> build_training_set(const ExperimentConfig& cfg, const PdeModel& model) {
  validate_config(cfg);
  const auto& grid = model.grid();
  std::vector<TrainingPair> out;
  Eigen::VectorXd u_b = Eigen::VectorXd::Zero(grid.num_nodes());
  auto add_pair = [&](const Eigen::VectorXd& u_dag, const Eigen::MatrixXd& forcing, int j) {
    TrainingPair p;
    p.u_dag = u_dag;
    p.forcing = forcing;
    p.y_dag = model.solve_forward(u_dag, forcing);
    p.z_o = make_observations(p.y_dag, grid, cfg.sd, cfg.seed + static_cast<std::uint64_t>(j));
    p.u_b = u_b;
    out.push_back(std::move(p));
  };
  if (cfg.preset == "single") {
    add_pair(reference_initial_condition(grid), default_forcing(model), 0);
  } else if (cfg.preset == "nine-variant") {
    Eigen::MatrixXd f = default_forcing(model);
    const double offs[3] = {-0.1, 0.0, 0.1};
    int j = 0;
    for (double ax : offs)
      for (double ay : offs)
        add_pair(reference_initial_condition(grid, ax, ay, cfg.jump ? 0.1 : 0.0), f, j++);
  } else {  // common-u-multi-forcing
    Eigen::VectorXd u_dag = reference_initial_condition(grid);
    for (int j = 0; j < cfg.pairs; ++j)
      add_pair(u_dag, default_forcing(model, 1.0 + 0.1 * j), j);
  }
  return out;
}

double space_time_norm(const PdeModel& model, const Eigen::MatrixXd& y) {
  const double h2 = model.grid().h * model.grid().h;
  const double tau = model.tg().tau;
  double acc = 0.0;
  for (int s = 1; s < y.cols(); ++s) acc += tau * h2 * y.col(s).squaredNorm();
  return std::sqrt(acc);
}

std::pair<double, double> error_metrics(const PdeModel& model,
                                        const std::vector<LowerSolution>& sols,
                                        const std::vector<TrainingPair>& training) {
  if (sols.size() != training.size()) throw ValidationError("solution/training count mismatch");
  const int N = static_cast<int>(sols.size());
  double sum_err = 0.0, sum_ref = 0.0;
  for (int j = 0; j < N; ++j) {
    if (sols[j].y.rows() != training[j].y_dag.rows() || sols[j].y.cols() != training[j].y_dag.cols())
      throw ValidationError("state shape mismatch in error metrics");
    sum_err += space_time_norm(model, training[j].y_dag - sols[j].y);
    sum_ref += space_time_norm(model, training[j].y_dag);
  }
  double error_abs = sum_err / N;
  double error_rel = (sum_ref > 0.0) ? error_abs * N / sum_ref : 0.0;
  return {error_abs, error_rel};
}

namespace {

UpperConfig make_upper_config(const ExperimentConfig& cfg, const PdeModel& model) {
  UpperConfig u;
  u.model = &model;
  u.theta = cfg.theta;
  u.alpha = cfg.alpha;
  u.beta = cfg.beta;
  u.beta_w = cfg.beta_w;
  u.beta_sigma = cfg.beta_sigma;
  u.eps_penalty = cfg.eps_penalty;
  u.tol = cfg.tol;
  u.max_iter = cfg.max_iter;
  u.workers = cfg.workers;
  return u;
}

void count_bands(const Placement& W, ReportRow& row) {
  for (int c = 0; c < W.w.size(); ++c) {
    switch (band_label_w(W.w[c])) {
      case 0: row.zeros_w++; break;
      case 2: row.i2_w++; break;
      case 3: row.i3_w++; break;
      default: row.ones_w++; break;
    }
  }
  for (int i = 0; i < W.sigma.size(); ++i) {
    switch (band_label_sigma(W.sigma[i])) {
      case 0: row.zeros_sigma++; break;
      case 2: row.i2_sigma++; break;
      case 3: row.i3_sigma++; break;
      default: row.ones_sigma++; break;
    }
  }
}

}  // namespace

RunReport run_experiment(const std::string& id, const ExperimentConfig& cfg) {
  if (id != "1a" && id != "1b" && id != "2" && id != "3" && id != "4")
    throw ValidationError("unknown experiment id '" + id + "'");
  validate_config(cfg);
  Instance inst = build_instance(cfg);
  const PdeModel& model = *inst.model;

  RunReport rep;
  rep.id = id;
  rep.sweep_name = (id == "1b") ? "beta_sigma" : "beta_w";
  rep.grid = inst.grid;
  rep.tg = inst.tg;

  struct Case {
    double value, sd;
  };
  std::vector<Case> cases;
  if (id == "1b")
    for (double v : cfg.sweep_beta_sigma) cases.push_back({v, cfg.sd});
  else if (id == "4")
    for (double sd : cfg.sweep_sd)
      for (double v : cfg.sweep_beta_w) cases.push_back({v, sd});
  else
    for (double v : cfg.sweep_beta_w) cases.push_back({v, cfg.sd});

  // Assimilation error with all sensors active, cached per noise level; it
  // measures data quality independently of the placement chosen for a row.
  std::map<double, std::pair<double, double>> err_cache;

  for (const Case& c : cases) {
    ReportRow row;
    row.sweep_value = c.value;
    row.sd = c.sd;
    try {
      ExperimentConfig rc = cfg;
      rc.sd = c.sd;
      if (id == "1b")
        rc.beta_sigma = c.value;
      else
        rc.beta_w = c.value;
      auto training = build_training_set(rc, model);
      UpperConfig ucfg = make_upper_config(rc, model);

      auto cached = err_cache.find(c.sd);
      if (cached == err_cache.end()) {
        Placement ones{Eigen::VectorXd::Ones(inst.grid.num_candidates()),
                       Eigen::VectorXd::Ones(inst.tg.n_T)};
        std::vector<LowerSolution> full(training.size());
        for (size_t j = 0; j < training.size(); ++j) {
          DAProblem prob;
          prob.model = &model;
          prob.u_b = training[j].u_b;
          prob.z_o = training[j].z_o;
          prob.forcing = training[j].forcing;
          prob.theta = rc.theta;
          prob.alpha = rc.alpha;
          prob.placement = ones;
          full[j] = assimilate(prob, training[j].u_b, ucfg.lower);
        }
        cached = err_cache.emplace(c.sd, error_metrics(model, full, training)).first;
      }
      row.error_abs = cached->second.first;
      row.error_rel = cached->second.second;

      PlacementResult result = optimize_placement(training, ucfg);

      row.J0 = result.cost_initial;
      row.Jend = result.cost_final;
      row.norm_w = result.W.w.sum();
      row.norm_sigma = result.W.sigma.sum();
      row.iter = result.outer_iterations;
      row.iter_da = result.inner_da_iterations;
      row.pde_solved = result.parabolic_solves;
      row.elliptic_solved = result.elliptic_solves;
      row.converged = result.converged;
      row.relaxed = result.W;
      count_bands(result.W, row);

      std::vector<LowerSolution> warm = result.sols;
      auto binary_cost = [&](const Placement& Wb) {
        std::vector<LowerSolution> sols(training.size());
        for (size_t j = 0; j < training.size(); ++j) {
          DAProblem prob;
          prob.model = &model;
          prob.u_b = training[j].u_b;
          prob.z_o = training[j].z_o;
          prob.forcing = training[j].forcing;
          prob.theta = rc.theta;
          prob.alpha = rc.alpha;
          prob.placement = Wb;
          sols[j] = assimilate(prob, warm[j].u, ucfg.lower);
        }
        return upper_cost(Wb, sols, training, ucfg, PenaltyMode::Sparsity);
      };
      row.binary = classify_and_binarize(result.W, binary_cost, true);
      row.bin_zeros_w = static_cast<int>((row.binary.w.array() == 0.0).count());
      row.bin_ones_w = static_cast<int>(row.binary.w.size()) - row.bin_zeros_w;
      row.bin_zeros_sigma = static_cast<int>((row.binary.sigma.array() == 0.0).count());
      row.bin_ones_sigma = static_cast<int>(row.binary.sigma.size()) - row.bin_zeros_sigma;

      row.ok = true;
      row.message = "ok";
    } catch (const std::exception& e) {
      row.ok = false;
      std::string msg = e.what();
      for (char& ch : msg)
        if (ch == ',' || ch == '\n') ch = ';';
      row.message = msg;
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

}  // namespace

void export_report(const RunReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw ValidationError("cannot create output directory: " + out_dir);

  auto open = [&](const std::string& name) {
    std::ofstream f(fs::path(out_dir) / name, std::ios::binary);
    if (!f) throw ValidationError("cannot write file: " + (fs::path(out_dir) / name).string());
    return f;
  };

  {
    auto f = open("report.csv");
    f << report.sweep_name
      << ",sd,zeros_w,i2_w,i3_w,ones_w,zeros_sigma,i2_sigma,i3_sigma,ones_sigma,"
         "J0,Jend,norm_w,norm_sigma,iter,iter_da,pde_solved,elliptic_solved,"
         "error_abs,error_rel,converged,status\n";
    for (const auto& r : report.rows) {
      f << fmt(r.sweep_value) << ',' << fmt(r.sd) << ',' << r.zeros_w << ',' << r.i2_w << ','
        << r.i3_w << ',' << r.ones_w << ',' << r.zeros_sigma << ',' << r.i2_sigma << ','
        << r.i3_sigma << ',' << r.ones_sigma << ',' << fmt(r.J0) << ',' << fmt(r.Jend) << ','
        << fmt(r.norm_w) << ',' << fmt(r.norm_sigma) << ',' << r.iter << ',' << r.iter_da << ','
        << r.pde_solved << ',' << r.elliptic_solved << ',' << fmt(r.error_abs) << ','
        << fmt(r.error_rel) << ',' << (r.converged ? 1 : 0) << ',' << r.message << '\n';
    }
  }
  {
    auto f = open("structure.csv");
    f << report.sweep_name << ",zeros_w,ones_w,zeros_sigma,ones_sigma\n";
    for (const auto& r : report.rows) {
      if (!r.ok) continue;
      f << fmt(r.sweep_value) << ',' << r.bin_zeros_w << ',' << r.bin_ones_w << ','
        << r.bin_zeros_sigma << ',' << r.bin_ones_sigma << '\n';
    }
  }
  for (size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    if (!r.ok) continue;
    {
      auto f = open("w_" + std::to_string(i) + ".dat");
      f << "x y label\n";
      for (int c = 0; c < r.relaxed.w.size(); ++c) {
        int k = report.grid.candidate_ids[c];
        f << fmt(report.grid.node_x(k)) << ' ' << fmt(report.grid.node_y(k)) << ' '
          << band_label_w(r.relaxed.w[c]) << '\n';
      }
    }
    {
      auto f = open("sigma_" + std::to_string(i) + ".dat");
      f << "t f_t\n";
      for (int j = 0; j < r.relaxed.sigma.size(); ++j) {
        f << j << ' ' << fmt(r.relaxed.sigma[j]) << '\n';
        f << j + 1 << ' ' << fmt(r.relaxed.sigma[j]) << '\n';
      }
    }
  }
}

}  // namespace oplace
