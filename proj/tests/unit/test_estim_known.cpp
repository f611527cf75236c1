#include "doctest.h"

#include "dynident/errors.hpp"
#include "dynident/estim_known.hpp"
#include "dynident/rng.hpp"

#include <algorithm>
#include <cmath>

using namespace dynident;

namespace {

Vec v(std::initializer_list<double> xs) {
  Vec out(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) out[i++] = x;
  return out;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const auto n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

TEST_CASE("optimizers on textbook problems") {
  SUBCASE("Nelder-Mead finds the Rosenbrock minimum") {
    auto rosen = [](const Vec& x) {
      return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
    };
    const auto res = optim::nelder_mead(rosen, v({-1.2, 1.0}));
    CHECK(res.converged);
    CHECK(std::abs(res.x[0] - 1.0) < 1e-4);
    CHECK(std::abs(res.x[1] - 1.0) < 1e-4);
  }
  SUBCASE("LM recovers an exponential decay") {
    Vec t(20), y(20);
    for (int i = 0; i < 20; ++i) {
      t[i] = 0.1 * i;
      y[i] = 2.5 * std::exp(-1.3 * t[i]);
    }
    auto residual = [&](const Vec& p) -> std::optional<Vec> {
      return Vec((p[0] * (-p[1] * t.array()).exp()).matrix() - y);
    };
    const auto res = optim::levenberg_marquardt(residual, v({1.0, 0.5}));
    CHECK(res.converged);
    CHECK(std::abs(res.x[0] - 2.5) < 1e-8);
    CHECK(std::abs(res.x[1] - 1.3) < 1e-8);
  }
  SUBCASE("projection keeps iterates inside bounds") {
    auto residual = [](const Vec& p) -> std::optional<Vec> { return Vec(p - v({5.0})); };
    auto project = [](const Vec& p) { return Vec(p.cwiseMin(v({2.0}))); };
    const auto res = optim::levenberg_marquardt(residual, v({0.0}), {}, project);
    CHECK(res.x[0] == 2.0);
  }
}

TEST_CASE("fit_closed_form") {
  SUBCASE("logistic growth with analytic derivatives is exact") {
    const auto& sys = find_system("ode6");
    const Vec theta = v({1.3, 1.8});
    const auto traj = integrate(sys, theta, sys.x0, default_grid(sys));
    const auto fit = fit_closed_form(sys, traj);
    CHECK(fit.method == FitMethod::closed_form);
    CHECK((fit.theta_hat - theta).cwiseAbs().maxCoeff() <= 1e-8);
  }
  SUBCASE("zero growth rate on a constant trajectory") {
    const auto& sys = find_system("ode2");
    const auto traj = integrate(sys, v({0.0}), v({3.0}), default_grid(sys));
    CHECK(fit_closed_form(sys, traj).theta_hat[0] == 0.0);
  }
  SUBCASE("duplicate basis functions are rejected as ill-conditioned") {
    OdeSystem dup = find_system("ode2");
    dup.id = "dup";
    dup.param_dim = 2;
    dup.param_box = {{0.5, 1.0}, {0.5, 1.0}};
    dup.field = [](auto th, auto x, auto dx) { dx[0] = (th[0] + th[1]) * x[0]; };
    auto phi = [](std::span<const double> x, std::span<double> o) { o[0] = x[0]; };
    dup.linear = LinearStructure{{phi, phi}, {}};
    const auto traj = integrate(dup, v({0.5, 0.5}), v({1.0}), default_grid(dup));
    CHECK_THROWS_AS(fit_closed_form(dup, traj), IllConditioned);
  }
  SUBCASE("systems without a basis are unsupported") {
    const auto& sys = find_system("ode3");
    const auto traj = integrate(sys, sys.canonical_theta, sys.x0, default_grid(sys));
    CHECK_THROWS_AS(fit_closed_form(sys, traj), UnsupportedOperation);
  }
  SUBCASE("missing derivative channel") {
    const auto& sys = find_system("ode2");
    auto traj = integrate(sys, sys.canonical_theta, sys.x0, default_grid(sys));
    traj.derivs.reset();
    CHECK_THROWS_AS(fit_closed_form(sys, traj), InvalidArgument);
  }
}

TEST_CASE("fit_derivative_matching") {
  const auto& sir = find_system("ode31");
  const Vec theta = sample_parameters(sir, 1, 5)[0].theta;
  const auto traj = integrate(sir, theta, sir.x0, default_grid(sir));

  SUBCASE("recovers SIR parameters from the box midpoint") {
    const auto fit = fit_derivative_matching(sir, traj, sir.box_midpoint());
    CHECK(fit.converged);
    CHECK((fit.theta_hat - theta).cwiseAbs().maxCoeff() <= 1e-6);
  }
  SUBCASE("starting at the truth converges immediately") {
    const auto fit = fit_derivative_matching(sir, traj, theta);
    CHECK(fit.converged);
    CHECK(fit.iterations <= 2);
    CHECK(fit.loss_final <= 1e-20);
  }
  SUBCASE("a single sample is not enough data") {
    Trajectory one = traj;
    one.states = traj.states.topRows(1);
    one.derivs = traj.derivs->topRows(1);
    one.grid = TimeGrid({0.0});
    CHECK_THROWS_AS(fit_derivative_matching(sir, one, theta), InvalidArgument);
  }
  SUBCASE("agrees with the closed form on linear systems") {
    for (const auto& sys : catalog()) {
      if (!sys.has_basis()) continue;
      CAPTURE(sys.id);
      for (const auto& d : sample_parameters(sys, 3, 21)) {
        const auto t = integrate(sys, d.theta, sys.x0, default_grid(sys));
        const auto a = fit_closed_form(sys, t);
        const auto b = fit_derivative_matching(sys, t, sys.box_midpoint());
        CHECK((a.theta_hat - b.theta_hat).cwiseAbs().maxCoeff() <= 1e-6);
      }
    }
  }
}

TEST_CASE("fit_trajectory_matching") {
  const auto& logistic = find_system("ode3");
  const Vec theta = v({1.4, 2.9});
  const auto traj = integrate(logistic, theta, logistic.x0, default_grid(logistic));

  SUBCASE("recovers logistic parameters from a noiseless trajectory") {
    const auto fit = fit_trajectory_matching(logistic, traj, logistic.box_midpoint());
    CHECK(fit.method == FitMethod::trajectory_matching);
    CHECK((fit.theta_hat - theta).cwiseAbs().maxCoeff() <= 1e-3);
  }
  SUBCASE("objective at the generating theta is integration error only") {
    CHECK(trajectory_objective(logistic, traj, theta) <= 1e-10);
    CHECK(trajectory_objective(logistic, traj, logistic.box_midpoint()) > 1e-6);
  }
  SUBCASE("estimate is projected into the box") {
    const Vec outside = v({1.95, 3.9});  // near the upper corner
    const auto t = integrate(logistic, v({2.2, 4.5}), logistic.x0, default_grid(logistic));
    const auto fit = fit_trajectory_matching(logistic, t, outside);
    CHECK(logistic.in_box(fit.theta_hat));
  }
  SUBCASE("all integrations diverging is an estimation failure") {
    OdeSystem blowup = find_system("ode2");
    blowup.id = "blowup";
    blowup.field = [](auto th, auto x, auto dx) { dx[0] = th[0] * x[0] * x[0]; };
    blowup.param_box = {{1.0, 2.0}};
    blowup.linear.reset();
    Trajectory fake;
    fake.grid = TimeGrid::uniform(0.0, 5.0, 11);
    fake.states = Mat::Ones(11, 1);
    CHECK_THROWS_AS(fit_trajectory_matching(blowup, fake, v({1.5})), EstimationFailure);
  }
}

TEST_CASE("benchmark_rmse") {
  SUBCASE("single draw has zero spread") {
    BenchOptions opt;
    opt.n_draws = 1;
    const auto reps = benchmark_rmse({"ode2"}, opt);
    REQUIRE(reps.size() == 1);
    CHECK(reps[0].rmse_std == 0.0);
    CHECK(reps[0].failures == 0);
  }
  SUBCASE("thread count does not change results") {
    BenchOptions opt;
    opt.n_draws = 6;
    opt.method = FitMethod::trajectory_matching;
    opt.threads = 1;
    const auto a = benchmark_rmse({"ode6", "ode24"}, opt);
    opt.threads = 3;
    const auto b = benchmark_rmse({"ode6", "ode24"}, opt);
    for (std::size_t s = 0; s < a.size(); ++s) {
      CHECK(a[s].draw_rmse == b[s].draw_rmse);
      CHECK(a[s].rmse_mean == b[s].rmse_mean);
      CHECK(a[s].rmse_mean <= 1e-3);
    }
  }
  SUBCASE("closed form on a basis-free system is rejected up front") {
    BenchOptions opt;
    opt.method = FitMethod::closed_form;
    CHECK_THROWS_AS(benchmark_rmse({"ode3"}, opt), UnsupportedOperation);
    CHECK_THROWS_AS(benchmark_rmse({"nope"}, opt), InvalidArgument);
  }
  SUBCASE("median error grows with observation noise") {
    BenchOptions opt;
    opt.n_draws = 20;
    double prev = -1.0;
    for (double sigma : {0.0, 1e-4, 1e-2}) {
      opt.noise = sigma;
      const auto rep = benchmark_rmse({"ode25"}, opt)[0];
      const double med = median(rep.draw_rmse);
      CHECK(med >= prev);
      prev = med;
    }
  }
}

TEST_CASE("objective at the truth beats random parameters") {
  for (const char* id : {"ode3", "ode27", "cartpole"}) {
    CAPTURE(id);
    const auto& sys = find_system(id);
    const auto truths = sample_parameters(sys, 3, 1);
    const auto others = sample_parameters(sys, 20, 2);
    for (const auto& d : truths) {
      const auto traj = integrate(sys, d.theta, sys.x0, default_grid(sys));
      const double at_truth = trajectory_objective(sys, traj, d.theta);
      for (const auto& o : others) CHECK(at_truth < trajectory_objective(sys, traj, o.theta));
    }
  }
}
