#pragma once

#include <memory>
#include <string>
#include <vector>

#include "oplace/upper.hpp"

namespace oplace {

// Flat key=value run configuration. Defaults reproduce the first single-pair
// sweep study (m=20, n=12, beta=0.09, 16 beta_w values).
struct ExperimentConfig {
  int m = 20;
  int n = 12;
  double eps_reg = 0.1;
  double theta = 1e-2;
  double alpha = 0.1;
  double beta = 0.09;
  double beta_w = 1e-4;
  double beta_sigma = 0.0;
  double eps_penalty = 0.5;
  double sd = 0.0;
  std::uint64_t seed = 42;
  std::string preset = "single";  // single | nine-variant | common-u-multi-forcing
  int pairs = 1;
  bool jump = false;              // add a step discontinuity to the variants
  std::string candidates = "all"; // all | restricted (the eight fixed points)
  double tol = 1e-3;
  int max_iter = 60;
  int workers = 1;
  std::vector<double> sweep_beta_w = {1e-5,   0.0001, 0.0003, 0.0005, 0.0010, 0.0020,
                                      0.0030, 0.0050, 0.0060, 0.0070, 0.0072, 0.0073,
                                      0.0074, 0.0078, 0.0079, 0.0080};
  std::vector<double> sweep_beta_sigma = {0.001, 0.002, 0.003, 0.005, 0.006, 0.007,
                                          0.008, 0.009, 0.01,  0.02,  0.05};
  std::vector<double> sweep_sd = {0.001, 0.01};
};

ExperimentConfig load_config(const std::string& path);
void apply_override(ExperimentConfig& cfg, const std::string& assignment);  // "key=value"
void validate_config(const ExperimentConfig& cfg);

// Preset parameters for a named experiment id (1a, 1b, 2, 3, 4), keeping
// worker count and seed from the base.
ExperimentConfig preset_config(const std::string& id, const ExperimentConfig& base);

// Problem assembled from a config: grid, time partition, model.
struct Instance {
  SpatialGrid grid;
  TimeGrid tg;
  std::unique_ptr<PdeModel> model;
};
Instance build_instance(const ExperimentConfig& cfg);

Eigen::MatrixXd default_forcing(const PdeModel& model, double scale = 1.0);
Eigen::VectorXd reference_initial_condition(const SpatialGrid& grid, double ax = 0.0,
                                            double ay = 0.0, double jump = 0.0);

std::vector<TrainingPair> build_training_set(const ExperimentConfig& cfg, const PdeModel& model);

// Space-time L2 norm with the quadrature used by all cost terms.
double space_time_norm(const PdeModel& model, const Eigen::MatrixXd& y);

// (mean absolute error, relative error) of the assimilated states.
std::pair<double, double> error_metrics(const PdeModel& model,
                                        const std::vector<LowerSolution>& sols,
                                        const std::vector<TrainingPair>& training);

struct ReportRow {
  double sweep_value = 0.0;
  double sd = 0.0;
  int zeros_w = 0, i2_w = 0, i3_w = 0, ones_w = 0;
  int zeros_sigma = 0, i2_sigma = 0, i3_sigma = 0, ones_sigma = 0;
  int bin_zeros_w = 0, bin_ones_w = 0, bin_zeros_sigma = 0, bin_ones_sigma = 0;
  double J0 = 0.0, Jend = 0.0;
  double norm_w = 0.0, norm_sigma = 0.0;
  int iter = 0, iter_da = 0;
  long pde_solved = 0, elliptic_solved = 0;
  double error_abs = 0.0, error_rel = 0.0;
  bool converged = false;
  bool ok = false;
  std::string message;
  Placement relaxed;
  Placement binary;
};

struct RunReport {
  std::string id;
  std::string sweep_name;  // beta_w or beta_sigma
  SpatialGrid grid;
  TimeGrid tg;
  std::vector<ReportRow> rows;
};

RunReport run_experiment(const std::string& id, const ExperimentConfig& cfg);

// report.csv, structure.csv, and per-row w_<i>.dat / sigma_<i>.dat plot data.
void export_report(const RunReport& report, const std::string& out_dir);

}  // namespace oplace
