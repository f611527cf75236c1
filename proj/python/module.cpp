#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dynident/cli_io.hpp"
#include "dynident/errors.hpp"
#include "dynident/estim_known.hpp"
#include "dynident/eval_causal.hpp"
#include "dynident/multiview.hpp"

namespace py = pybind11;
using namespace dynident;

namespace {

Trajectory make_traj(const std::string& system_id, const std::vector<double>& t, const Mat& states,
                     const std::optional<Mat>& derivs) {
  Trajectory traj;
  traj.system_id = system_id;
  traj.grid = TimeGrid(t);
  traj.states = states;
  traj.derivs = derivs;
  if (states.rows() != static_cast<Eigen::Index>(t.size()))
    throw InvalidArgument("states must have one row per time point");
  return traj;
}

py::dict fit_to_dict(const FitResult& r) {
  py::dict d;
  d["theta_hat"] = r.theta_hat;
  d["loss_final"] = r.loss_final;
  d["method"] = to_string(r.method);
  d["iterations"] = r.iterations;
  d["converged"] = r.converged;
  return d;
}

py::dict ate_to_dict(const AteResult& r) {
  py::dict d;
  d["ate_hat"] = r.ate_hat;
  d["se_hat"] = r.se_hat;
  d["n"] = r.n;
  d["clipped_fraction"] = r.clipped_fraction;
  d["warnings"] = r.warnings;
  return d;
}

std::vector<const Trajectory*> first_views(const MultiviewDataset& ds) {
  std::vector<const Trajectory*> out;
  for (const auto& p : ds.pairs) out.push_back(&p.views.front());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Parameter identification for dynamical systems";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<DegenerateLabels>(m, "DegenerateLabels", PyExc_ValueError);
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.attr("catalog_version") = kCatalogVersion;

  m.def("systems", [] {
    py::list out;
    for (const auto& s : catalog()) {
      py::dict d;
      d["id"] = s.id;
      d["name"] = s.name;
      d["state_dim"] = s.state_dim;
      d["param_dim"] = s.param_dim;
      std::vector<std::pair<double, double>> box;
      for (const auto& b : s.param_box) box.emplace_back(b.lo, b.hi);
      d["param_box"] = box;
      d["linear_in_theta"] = s.has_basis();
      d["chaotic"] = s.chaotic;
      d["canonical_theta"] = s.canonical_theta;
      d["x0"] = s.x0;
      d["t_max"] = s.t_max;
      d["grid_points"] = s.grid_points;
      out.append(d);
    }
    return out;
  });

  m.def(
      "vector_field",
      [](const std::string& id, const Vec& theta, const Vec& x) { return eval_vector_field(find_system(id), theta, x); },
      py::arg("system"), py::arg("theta"), py::arg("x"));

  m.def(
      "integrate",
      [](const std::string& id, const Vec& theta, std::optional<Vec> x0, std::optional<std::vector<double>> t,
         double h_int) {
        const auto& sys = find_system(id);
        const TimeGrid grid = t ? TimeGrid(*t) : default_grid(sys);
        IntegrateOptions opt;
        opt.h_int = h_int;
        const auto traj = integrate(sys, theta, x0 ? *x0 : sys.x0, grid, opt);
        return py::make_tuple(traj.grid.points(), traj.states);
      },
      py::arg("system"), py::arg("theta"), py::arg("x0") = py::none(), py::arg("t") = py::none(),
      py::arg("h_int") = 0.0, "Returns (t, states) with states of shape (T, d).");

  m.def(
      "estimate_derivatives",
      [](const Mat& states, const std::vector<double>& t) { return estimate_derivatives(states, TimeGrid(t)); },
      py::arg("states"), py::arg("t"));

  m.def(
      "fit",
      [](const std::string& id, const std::vector<double>& t, const Mat& states, std::optional<Mat> derivs,
         const std::string& method, std::optional<Vec> theta0) {
        const auto& sys = find_system(id);
        const auto traj = make_traj(id, t, states, derivs);
        const Vec start = theta0 ? *theta0 : sys.box_midpoint();
        switch (fit_method_from_string(method)) {
          case FitMethod::closed_form:
            return fit_to_dict(fit_closed_form(sys, traj));
          case FitMethod::derivative_matching:
            return fit_to_dict(fit_derivative_matching(sys, traj, start));
          case FitMethod::trajectory_matching:
            return fit_to_dict(fit_trajectory_matching(sys, traj, start));
        }
        throw InvalidArgument("unknown method");
      },
      py::arg("system"), py::arg("t"), py::arg("states"), py::arg("derivs") = py::none(),
      py::arg("method") = "deriv", py::arg("theta0") = py::none());

  m.def(
      "benchmark",
      [](const std::vector<std::string>& ids, int draws, const std::string& method, double noise,
         const std::string& derivatives, std::uint64_t seed, int threads) {
        BenchOptions opt;
        opt.n_draws = draws;
        opt.method = fit_method_from_string(method);
        opt.noise = noise;
        opt.derivatives = derivatives == "estimated" ? DerivativeSource::estimated : DerivativeSource::exact;
        opt.seed = seed;
        opt.threads = threads;
        py::list out;
        for (const auto& r : benchmark_rmse(ids, opt)) {
          py::dict d;
          d["system_id"] = r.system_id;
          d["n_draws"] = r.n_draws;
          d["rmse_mean"] = r.rmse_mean;
          d["rmse_std"] = r.rmse_std;
          d["failures"] = r.failures;
          d["method"] = to_string(r.method);
          d["draw_rmse"] = r.draw_rmse;
          out.append(d);
        }
        return out;
      },
      py::arg("systems"), py::arg("draws") = 100, py::arg("method") = "deriv", py::arg("noise") = 0.0,
      py::arg("derivatives") = "exact", py::arg("seed") = 7, py::arg("threads") = 1);

  m.def(
      "encode",
      [](const std::filesystem::path& model_path, const std::filesystem::path& data_path) {
        const auto model = identifier_from_json(load_json_file(model_path));
        const auto data = read_multiview_jsonl(data_path);
        return encode_all(model, first_views(data));
      },
      py::arg("model"), py::arg("data"), "Latents of the first view of every record, shape (n, latent_dim).");

  m.def(
      "parameters",
      [](const std::filesystem::path& data_path) {
        const auto data = read_multiview_jsonl(data_path);
        const auto views = first_views(data);
        Mat theta(static_cast<Eigen::Index>(views.size()), views.front()->theta_truth->size());
        for (std::size_t i = 0; i < views.size(); ++i)
          theta.row(static_cast<Eigen::Index>(i)) = views[i]->theta_truth->transpose();
        return theta;
      },
      py::arg("data"), "Ground-truth parameters of the first view of every record.");

  m.def(
      "latent_r2",
      [](const Mat& block, const Mat& targets, std::uint64_t seed) {
        const auto r = latent_r2(block, targets, seed);
        return py::make_tuple(r.per_component, r.mean);
      },
      py::arg("block"), py::arg("targets"), py::arg("seed") = 0);

  m.def(
      "aipw_ate",
      [](const Vec& y, const std::vector<int>& t, const Mat& x) { return ate_to_dict(aipw_ate(y, t, x)); },
      py::arg("outcomes"), py::arg("treatments"), py::arg("covariates"));

  m.def("isotonic_fit", &isotonic_fit, py::arg("values"));

  m.def("format_mean_std", &format_mean_std, py::arg("mean"), py::arg("std"));

  m.def(
      "main",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "dynident");
        py::gil_scoped_release release;
        return run_command(args);
      },
      py::arg("args"), "Runs a CLI subcommand; returns the exit code.");
}
