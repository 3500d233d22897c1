#pragma once

#include <Eigen/Core>
#include <functional>
#include <vector>

#include "oplace/lower.hpp"
#include "oplace/sparsity.hpp"

namespace oplace {

// One supervised sample: a clean initial condition, its simulated state, the
// (possibly noisy) observations, the background, and the forcing term.
struct TrainingPair {
  Eigen::VectorXd u_dag;
  Eigen::MatrixXd y_dag;
  ObservationSeries z_o;
  Eigen::VectorXd u_b;
  Eigen::MatrixXd forcing;
};

enum class PenaltyMode { Linear, Sparsity };

struct UpperConfig {
  const PdeModel* model = nullptr;
  double theta = 1e-2;
  double alpha = 0.1;
  double beta = 0.0;
  double beta_w = 0.0;
  double beta_sigma = 0.0;
  double eps_penalty = 0.5;
  double eps_active_max = 0.1;
  double gamma_armijo = 1e-4;
  double tol = 1e-6;
  int max_iter = 60;           // per stage
  int max_line_trials = 40;
  int max_adjoint_applications = 200;
  double adjoint_tol = 1e-8;
  AssimilateOptions lower;
  int workers = 1;
};

// Multipliers of the componentwise box bounds, recovered from the gradient.
struct KKTMultipliers {
  Eigen::VectorXd lambda_a;  // lower bound
  Eigen::VectorXd lambda_b;  // upper bound
  double complementarity_residual = 0.0;
};

// Solution of the coupled adjoint system around one assimilated pair.
struct BilevelAdjoint {
  Eigen::MatrixXd eta;
  Eigen::MatrixXd zeta;
  Eigen::VectorXd tau;
  double residual = 0.0;
};

double upper_cost(const Placement& W, const std::vector<LowerSolution>& sols,
                  const std::vector<TrainingPair>& training, const UpperConfig& cfg,
                  PenaltyMode mode);

BilevelAdjoint solve_bilevel_adjoint(const LowerSolution& sol, const TrainingPair& pair,
                                     const Placement& W, const UpperConfig& cfg);

Eigen::VectorXd upper_gradient(const Placement& W, const std::vector<LowerSolution>& sols,
                               const std::vector<BilevelAdjoint>& adjoints,
                               const std::vector<TrainingPair>& training,
                               const UpperConfig& cfg, PenaltyMode mode);

// Indices within eps_k of a box bound; true marks active entries.
std::vector<bool> epsilon_active_set(const Eigen::VectorXd& W, double eps_k);

Eigen::MatrixXd reduced_bfgs_update(const Eigen::MatrixXd& B, const Eigen::VectorXd& W_old,
                                    const Eigen::VectorXd& W_new, const Eigen::VectorXd& grad_old,
                                    const Eigen::VectorXd& grad_new, const std::vector<bool>& active);

Eigen::VectorXd search_direction(const Eigen::MatrixXd& B, const Eigen::VectorXd& grad,
                                 const std::vector<bool>& active);

Eigen::VectorXd clamp01(const Eigen::VectorXd& v);

// Largest step in {1/(2^i * grad_norm_at_start)} satisfying the projected
// sufficient-decrease condition. Returns step 0 when the projected step is
// identically zero (stationary clamped point).
struct ArmijoResult {
  double step = 0.0;
  Eigen::VectorXd W_next;
};
ArmijoResult armijo_project(const std::function<double(const Eigen::VectorXd&)>& cost,
                            const Eigen::VectorXd& W, const Eigen::VectorXd& d,
                            double current_cost, double grad_norm_at_start, double gamma,
                            int max_trials = 40);

KKTMultipliers kkt_extract(const Eigen::VectorXd& W, const Eigen::VectorXd& grad_sparsity);

struct HistoryRow {
  int stage = 0;
  int iteration = 0;
  double cost = 0.0;
  double norm_w = 0.0;
  double norm_sigma = 0.0;
  double pg_norm = 0.0;
  int active_count = 0;
  double step = 0.0;
};

struct PlacementResult {
  Placement W;
  KKTMultipliers kkt;
  std::vector<HistoryRow> history;
  std::vector<LowerSolution> sols;
  double cost_initial = 0.0;  // stage-1 start, linear penalty
  double cost_final = 0.0;    // stage-2 end, sparsity penalty
  int outer_iterations = 0;   // both stages
  int inner_da_iterations = 0;
  long parabolic_solves = 0;
  long elliptic_solves = 0;
  bool converged = false;
};

PlacementResult optimize_placement(const std::vector<TrainingPair>& training, const UpperConfig& cfg);

// Interval classification of a relaxed solution; middle-band entries are
// resolved by exhaustive search over their binary completions using the
// supplied cost of a candidate binary placement.
Placement classify_and_binarize(const Placement& W,
                                const std::function<double(const Placement&)>& binary_cost,
                                bool threshold_fallback = false);

// Band labels 0..3 matching the scatter classes of the exported plot data.
int band_label_w(double x);
int band_label_sigma(double x);

}  // namespace oplace
