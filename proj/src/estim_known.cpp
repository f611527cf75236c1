#include "dynident/estim_known.hpp"

#include "dynident/errors.hpp"
#include "dynident/parallel.hpp"
#include "dynident/rng.hpp"

#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>

namespace dynident {

std::string to_string(FitMethod method) {
  switch (method) {
    case FitMethod::closed_form: return "closed_form";
    case FitMethod::derivative_matching: return "derivative_matching";
    case FitMethod::trajectory_matching: return "trajectory_matching";
  }
  return "unknown";
}

FitMethod fit_method_from_string(const std::string& name) {
  if (name == "closed" || name == "closed_form") return FitMethod::closed_form;
  if (name == "deriv" || name == "derivative_matching") return FitMethod::derivative_matching;
  if (name == "traj" || name == "trajectory_matching") return FitMethod::trajectory_matching;
  throw InvalidArgument("unknown fit method '" + name + "' (expected closed|deriv|traj)");
}

namespace {

Vec flatten_time_major(const Mat& m) {
  const Mat t = m.transpose();
  return Eigen::Map<const Vec>(t.data(), t.size());
}

void require_theta(const OdeSystem& system, const Vec& theta) {
  if (theta.size() != system.param_dim)
    throw InvalidArgument(system.id + ": theta0 has wrong dimension");
  if (!theta.allFinite()) throw InvalidArgument(system.id + ": theta0 must be finite");
}

Vec clamp_to_box(const OdeSystem& system, const Vec& theta) {
  return theta.cwiseMax(system.box_lower()).cwiseMin(system.box_upper());
}

}  // namespace

FitResult fit_closed_form(const OdeSystem& system, const Trajectory& traj,
                          const ClosedFormOptions& options) {
  if (!system.has_basis())
    throw UnsupportedOperation(system.id + ": closed-form fit needs a linear-in-theta basis");
  if (!traj.derivs) throw InvalidArgument("fit_closed_form: trajectory has no derivative channel");

  const Mat design = basis_matrix(system, traj.states).transpose();  // (T*d) x m
  const Vec target = flatten_time_major(*traj.derivs) - offset_vector(system, traj.states);

  Eigen::JacobiSVD<Mat> svd(design);
  const Vec s = svd.singularValues();
  const double smax = s.size() ? s[0] : 0.0;
  const double smin = s.size() ? s[s.size() - 1] : 0.0;
  const double condition = smin > 0.0 ? (smax / smin) * (smax / smin)
                                       : std::numeric_limits<double>::infinity();
  if (!(condition <= options.max_condition) || design.rows() < design.cols())
    throw IllConditioned(system.id + ": Gram matrix is ill-conditioned (cond = " +
                             std::to_string(condition) + ")",
                         condition);

  FitResult fit;
  fit.theta_hat = design.colPivHouseholderQr().solve(target);
  fit.loss_final = (design * fit.theta_hat - target).squaredNorm();
  fit.method = FitMethod::closed_form;
  fit.iterations = 1;
  fit.converged = fit.theta_hat.allFinite();
  return fit;
}

FitResult fit_derivative_matching(const OdeSystem& system, const Trajectory& traj,
                                  const Vec& theta0, const optim::LmOptions& options) {
  require_theta(system, theta0);
  if (!traj.derivs) throw InvalidArgument("fit_derivative_matching: trajectory has no derivatives");
  if (traj.length() < 2)
    throw InvalidArgument("fit_derivative_matching: need at least two samples");
  if (traj.dim() != system.state_dim)
    throw InvalidArgument(system.id + ": trajectory state dimension mismatch");

  const int d = system.state_dim;
  const Vec target = flatten_time_major(*traj.derivs);
  const Mat& states = traj.states;

  auto residual = [&](const Vec& theta) -> std::optional<Vec> {
    Vec r(target.size());
    const std::span<const double> th{theta.data(), static_cast<std::size_t>(theta.size())};
    Vec x(d);
    for (Eigen::Index t = 0; t < states.rows(); ++t) {
      x = states.row(t).transpose();
      system.field(th, {x.data(), static_cast<std::size_t>(d)},
                   {r.data() + t * d, static_cast<std::size_t>(d)});
    }
    r -= target;
    if (!r.allFinite()) return std::nullopt;
    return r;
  };

  if (!residual(theta0))
    throw NumericDomainError(system.id + ": vector field is not finite at theta0 along the data");

  const auto res = optim::levenberg_marquardt(residual, theta0, options);
  return {res.x, res.loss, FitMethod::derivative_matching, res.iterations, res.converged};
}

double trajectory_objective(const OdeSystem& system, const Trajectory& traj, const Vec& theta,
                            const IntegrateOptions& integration) {
  try {
    const Vec x0 = traj.states.row(0).transpose();
    const auto sim = integrate(system, theta, x0, traj.grid, integration);
    return (sim.states - traj.states).squaredNorm();
  } catch (const DivergenceError&) {
    return std::numeric_limits<double>::infinity();
  } catch (const NumericDomainError&) {
    return std::numeric_limits<double>::infinity();
  }
}

FitResult fit_trajectory_matching(const OdeSystem& system, const Trajectory& traj,
                                  const Vec& theta0, const TrajectoryFitOptions& options) {
  require_theta(system, theta0);
  if (traj.length() < 2)
    throw InvalidArgument("fit_trajectory_matching: need at least two grid points");
  if (traj.dim() != system.state_dim)
    throw InvalidArgument(system.id + ": trajectory state dimension mismatch");

  const Vec x0 = traj.states.row(0).transpose();
  const Vec target = flatten_time_major(traj.states);
  auto residual = [&](const Vec& theta) -> std::optional<Vec> {
    try {
      const auto sim = integrate(system, theta, x0, traj.grid, options.integration);
      return Vec(flatten_time_major(sim.states) - target);
    } catch (const DivergenceError&) {
      return std::nullopt;
    } catch (const NumericDomainError&) {
      return std::nullopt;
    }
  };
  auto objective = [&](const Vec& theta) {
    const auto r = residual(theta);
    return r ? r->squaredNorm() : std::numeric_limits<double>::infinity();
  };
  auto project = [&](const Vec& theta) { return clamp_to_box(system, theta); };

  std::vector<Vec> starts{project(theta0)};
  const int restarts = options.restarts >= 0 ? options.restarts : (system.chaotic ? 5 : 0);
  Rng rng = make_rng(derive_seed(options.seed, "trajectory_matching.restarts"));
  for (int i = 0; i < restarts; ++i) {
    Vec s(system.param_dim);
    for (int k = 0; k < system.param_dim; ++k) {
      const auto& b = system.param_box[static_cast<std::size_t>(k)];
      s[k] = uniform(rng, b.lo, b.hi);
    }
    starts.push_back(std::move(s));
  }

  FitResult best;
  best.method = FitMethod::trajectory_matching;
  best.loss_final = std::numeric_limits<double>::infinity();
  int total_iterations = 0;
  for (const auto& start : starts) {
    auto lm = optim::levenberg_marquardt(residual, start, options.lm, project);
    total_iterations += lm.iterations;
    optim::OptimResult chosen = lm;
    if (!lm.converged) {
      const Vec nm_start = std::isfinite(lm.loss) ? lm.x : start;
      auto nm = optim::nelder_mead(objective, nm_start, options.nelder_mead, project);
      total_iterations += nm.iterations;
      if (nm.loss < lm.loss || !std::isfinite(lm.loss)) chosen = nm;
    }
    if (chosen.loss < best.loss_final) {
      best.theta_hat = chosen.x;
      best.loss_final = chosen.loss;
      best.converged = chosen.converged;
    }
  }
  best.iterations = total_iterations;
  if (!std::isfinite(best.loss_final))
    throw EstimationFailure(system.id + ": every trajectory-matching integration diverged");
  return best;
}

double parameter_rmse(const Vec& theta_hat, const Vec& theta) {
  return (theta_hat - theta).norm() / std::sqrt(static_cast<double>(theta.size()));
}

namespace {

std::optional<double> run_draw(const OdeSystem& system, const ParameterDraw& draw,
                               const BenchOptions& options) {
  try {
    const auto grid = default_grid(system);
    Trajectory traj = integrate(system, draw.theta, system.x0, grid);
    traj.theta_truth.reset();
    if (options.noise > 0.0) {
      Rng rng = make_rng(derive_seed(derive_seed(options.seed, "bench.noise." + system.id),
                                     static_cast<std::uint64_t>(draw.draw_index)));
      for (Eigen::Index i = 0; i < traj.states.size(); ++i)
        traj.states.data()[i] += options.noise * standard_normal(rng);
    }
    if (options.derivatives == DerivativeSource::estimated) traj.derivs = estimate_derivatives(traj);

    FitResult fit;
    switch (options.method) {
      case FitMethod::closed_form:
        fit = fit_closed_form(system, traj);
        break;
      case FitMethod::derivative_matching:
        fit = fit_derivative_matching(system, traj, system.box_midpoint());
        break;
      case FitMethod::trajectory_matching: {
        TrajectoryFitOptions topt;
        topt.seed = derive_seed(derive_seed(options.seed, "bench.restarts." + system.id),
                                static_cast<std::uint64_t>(draw.draw_index));
        fit = fit_trajectory_matching(system, traj, system.box_midpoint(), topt);
        break;
      }
    }
    if (!fit.theta_hat.allFinite()) return std::nullopt;
    return parameter_rmse(fit.theta_hat, draw.theta);
  } catch (const DivergenceError&) {
  } catch (const NumericDomainError&) {
  } catch (const EstimationFailure&) {
  } catch (const IllConditioned&) {
  }
  return std::nullopt;
}

}  // namespace

std::vector<EstimateReport> benchmark_rmse(const std::vector<std::string>& system_ids,
                                           const BenchOptions& options) {
  if (options.n_draws < 1) throw InvalidArgument("benchmark_rmse: n_draws must be >= 1");
  for (const auto& id : system_ids) {
    const auto& sys = find_system(id);
    if (options.method == FitMethod::closed_form && !sys.has_basis())
      throw UnsupportedOperation(id + ": closed-form method needs a linear-in-theta basis");
  }

  std::vector<EstimateReport> reports;
  for (const auto& id : system_ids) {
    const auto& sys = find_system(id);
    const auto start = std::chrono::steady_clock::now();
    const auto draws = sample_parameters(sys, options.n_draws, derive_seed(options.seed, "bench.theta"));

    std::vector<std::optional<double>> results(draws.size());
    parallel_for(draws.size(), options.threads,
                 [&](std::size_t i) { results[i] = run_draw(sys, draws[i], options); });

    EstimateReport rep;
    rep.system_id = id;
    rep.n_draws = options.n_draws;
    rep.method = options.method;
    double sum = 0.0;
    int ok = 0;
    for (const auto& r : results) {
      rep.draw_rmse.push_back(r ? *r : std::numeric_limits<double>::quiet_NaN());
      if (r) {
        sum += *r;
        ++ok;
      } else {
        ++rep.failures;
      }
    }
    if (ok > 0) {
      rep.rmse_mean = sum / ok;
      double ss = 0.0;
      for (const auto& r : results)
        if (r) ss += (*r - rep.rmse_mean) * (*r - rep.rmse_mean);
      rep.rmse_std = std::sqrt(ss / ok);
    } else {
      rep.rmse_mean = rep.rmse_std = std::numeric_limits<double>::quiet_NaN();
    }
    rep.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace dynident
