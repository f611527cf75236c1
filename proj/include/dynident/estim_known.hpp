#pragma once

#include "dynident/optim.hpp"
#include "dynident/solver.hpp"
#include "dynident/systems.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dynident {

enum class FitMethod { closed_form, derivative_matching, trajectory_matching };

std::string to_string(FitMethod method);
FitMethod fit_method_from_string(const std::string& name);  // "closed"/"deriv"/"traj" or full names

struct FitResult {
  Vec theta_hat;
  double loss_final = 0.0;
  FitMethod method = FitMethod::closed_form;
  int iterations = 0;
  bool converged = false;
};

struct ClosedFormOptions {
  double max_condition = 1e12;  // condition number of the Gram matrix
};

// Ordinary least squares on the linear-in-theta structure:
// theta* = argmin || Phi^T theta - (xdot - offset) ||^2, Phi = basis_matrix.
FitResult fit_closed_form(const OdeSystem& system, const Trajectory& traj,
                          const ClosedFormOptions& options = {});

// Regresses field(theta, x(t)) onto the derivative channel with LM.
FitResult fit_derivative_matching(const OdeSystem& system, const Trajectory& traj,
                                  const Vec& theta0, const optim::LmOptions& options = {});

struct TrajectoryFitOptions {
  optim::LmOptions lm;
  optim::NelderMeadOptions nelder_mead;
  IntegrateOptions integration;
  int restarts = -1;  // < 0: 5 uniform restarts for chaotic systems, none otherwise
  std::uint64_t seed = 0;
};

// || F(theta) - x ||^2 with F = integrate from traj.states[0] on traj.grid;
// +inf when the integration fails.
double trajectory_objective(const OdeSystem& system, const Trajectory& traj, const Vec& theta,
                            const IntegrateOptions& integration = {});

// LM within the parameter box (projected), Nelder-Mead when LM stalls,
// optional multi-start. The result always lies inside param_box.
FitResult fit_trajectory_matching(const OdeSystem& system, const Trajectory& traj,
                                  const Vec& theta0, const TrajectoryFitOptions& options = {});

enum class DerivativeSource { exact, estimated };

struct BenchOptions {
  FitMethod method = FitMethod::derivative_matching;
  int n_draws = 100;
  double noise = 0.0;  // std of i.i.d. Gaussian noise added to states
  DerivativeSource derivatives = DerivativeSource::exact;
  std::uint64_t seed = 7;
  int threads = 1;
};

struct EstimateReport {
  std::string system_id;
  int n_draws = 0;
  double rmse_mean = 0.0;
  double rmse_std = 0.0;
  int failures = 0;
  FitMethod method = FitMethod::derivative_matching;
  double wall_time_s = 0.0;
  std::vector<double> draw_rmse;  // per draw, NaN for failed draws
};

// ||theta_hat - theta||_2 / sqrt(N)
double parameter_rmse(const Vec& theta_hat, const Vec& theta);

std::vector<EstimateReport> benchmark_rmse(const std::vector<std::string>& system_ids,
                                           const BenchOptions& options);

}  // namespace dynident
