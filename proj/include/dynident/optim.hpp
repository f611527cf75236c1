#pragma once

#include "dynident/systems.hpp"

#include <functional>
#include <optional>

namespace dynident::optim {

// Residual vector at theta, or std::nullopt when the model cannot be
// evaluated there (divergent integration, non-finite output).
using ResidualFn = std::function<std::optional<Vec>(const Vec& theta)>;
using ObjectiveFn = std::function<double(const Vec& theta)>;
using Projector = std::function<Vec(const Vec& theta)>;

struct LmOptions {
  double lambda0 = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 10.0;
  double lambda_max = 1e16;
  int max_iter = 200;
  double step_tol = 1e-10;  // relative step
  double loss_tol = 1e-12;  // relative loss decrease
};

struct NelderMeadOptions {
  double reflection = 1.0;
  double expansion = 2.0;
  double contraction = 0.5;
  double shrink = 0.5;
  int max_iter = 2000;
  double initial_step = 0.05;  // relative to |x| (absolute floor 0.05)
  double f_tol = 1e-14;
  double x_tol = 1e-12;
};

struct OptimResult {
  Vec x;
  double loss = 0.0;  // sum of squared residuals (LM) or objective (NM)
  int iterations = 0;
  bool converged = false;
  bool stalled = false;
};

// Levenberg-Marquardt with a forward-difference Jacobian and Marquardt
// diagonal scaling. Steps are passed through `project` when given.
OptimResult levenberg_marquardt(const ResidualFn& residual, const Vec& x0,
                                const LmOptions& options = {},
                                const Projector& project = {});

OptimResult nelder_mead(const ObjectiveFn& objective, const Vec& x0,
                        const NelderMeadOptions& options = {},
                        const Projector& project = {});

// Falls back to a backward difference where the forward point cannot be evaluated.
Mat forward_difference_jacobian(const ResidualFn& residual, const Vec& x, const Vec& r0);

}  // namespace dynident::optim
