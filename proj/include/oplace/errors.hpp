#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace oplace {

// Bad user input or inconsistent problem data. CLI maps this to exit code 2.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Failure of a numerical procedure. CLI maps this to exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Newton iteration did not reach the residual tolerance at some time step.
struct NonconvergenceError : NumericalError {
  int step;
  double residual;
  NonconvergenceError(const std::string& msg, int step_, double residual_)
      : NumericalError(msg + " (step " + std::to_string(step_) +
                       ", residual " + std::to_string(residual_) + ")"),
        step(step_),
        residual(residual_) {}
};

// Line search exhausted its trial steps. Carries the last accepted iterate.
struct StalledSearchError : NumericalError {
  Eigen::VectorXd last_iterate;
  StalledSearchError(const std::string& msg, Eigen::VectorXd iterate)
      : NumericalError(msg), last_iterate(std::move(iterate)) {}
};

// Matrix-free solve of the coupled adjoint system ran out of applications.
struct AdjointSolverError : NumericalError {
  double residual;
  AdjointSolverError(const std::string& msg, double residual_)
      : NumericalError(msg + " (residual " + std::to_string(residual_) + ")"),
        residual(residual_) {}
};

// Too many non-binary entries for an exhaustive binarization.
struct TooAmbiguousError : NumericalError {
  using NumericalError::NumericalError;
};

}  // namespace oplace
