#include "dynident/solver.hpp"

#include "dynident/errors.hpp"
#include "dynident/rng.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace dynident {

double standard_normal(Rng& rng) {
  double u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

TimeGrid::TimeGrid(std::vector<double> points) : points_(std::move(points)) {
  if (points_.empty()) throw InvalidArgument("time grid must have at least one point");
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (!std::isfinite(points_[i])) throw InvalidArgument("time grid has a non-finite point");
    if (i > 0 && !(points_[i] > points_[i - 1]))
      throw InvalidArgument("time grid points must be strictly increasing");
  }
}

TimeGrid TimeGrid::uniform(double t0, double t_max, int count) {
  if (count < 1) throw InvalidArgument("time grid needs at least one point");
  if (count == 1) return TimeGrid({t0});
  if (!(t_max > t0)) throw InvalidArgument("time grid requires t_max > t0");
  std::vector<double> pts(static_cast<std::size_t>(count));
  const double h = (t_max - t0) / (count - 1);
  for (int i = 0; i < count; ++i) pts[static_cast<std::size_t>(i)] = t0 + h * i;
  pts.back() = t_max;
  return TimeGrid(std::move(pts));
}

bool TimeGrid::is_uniform(double rel_tol) const {
  if (points_.size() < 3) return true;
  const double h = spacing();
  for (std::size_t i = 1; i < points_.size(); ++i)
    if (std::abs((points_[i] - points_[i - 1]) - h) > rel_tol * std::abs(h) + 1e-14) return false;
  return true;
}

double TimeGrid::spacing() const {
  if (points_.size() < 2) return 0.0;
  return (points_.back() - points_.front()) / static_cast<double>(points_.size() - 1);
}

TimeGrid default_grid(const OdeSystem& system) {
  return TimeGrid::uniform(0.0, system.t_max, system.grid_points);
}

double default_substep(const TimeGrid& grid) {
  if (grid.size() < 2) return 0.0;
  return (grid.t_max() - grid.t0()) / (50.0 * grid.size());
}

namespace {

struct FieldCaller {
  const OdeSystem& system;
  std::span<const double> theta;

  void operator()(const Vec& x, Vec& dx, double t) const {
    system.field(theta, {x.data(), static_cast<std::size_t>(x.size())},
                 {dx.data(), static_cast<std::size_t>(dx.size())});
    if (!dx.allFinite()) {
      std::ostringstream msg;
      msg << system.id << ": non-finite vector field output at t=" << t;
      throw NumericDomainError(msg.str());
    }
  }
};

}  // namespace

Trajectory integrate(const OdeSystem& system, const Vec& theta, const Vec& x0,
                     const TimeGrid& grid, const IntegrateOptions& options) {
  if (theta.size() != system.param_dim || x0.size() != system.state_dim)
    throw InvalidArgument(system.id + ": integrate dimension mismatch");
  if (!theta.allFinite() || !x0.allFinite())
    throw InvalidArgument(system.id + ": integrate requires finite theta and x0");
  if (grid.size() < 1) throw InvalidArgument("integrate: empty grid");

  const int d = system.state_dim;
  const int T = grid.size();
  const double h_int = options.h_int > 0.0 ? options.h_int : default_substep(grid);
  const FieldCaller f{system, {theta.data(), static_cast<std::size_t>(theta.size())}};

  Trajectory traj;
  traj.system_id = system.id;
  traj.theta_truth = theta;
  traj.grid = grid;
  traj.states.resize(T, d);
  Mat derivs(T, d);

  Vec x = x0, k1(d), k2(d), k3(d), k4(d), tmp(d);
  double t = grid.t0();
  traj.states.row(0) = x.transpose();
  f(x, k1, t);
  derivs.row(0) = k1.transpose();

  for (int i = 1; i < T; ++i) {
    const double span = grid[i] - grid[i - 1];
    const long steps = std::max(1L, static_cast<long>(std::ceil(span / h_int - 1e-9)));
    const double h = span / static_cast<double>(steps);
    for (long s = 0; s < steps; ++s) {
      const double ts = grid[i - 1] + h * static_cast<double>(s);
      f(x, k1, ts);
      tmp = x + 0.5 * h * k1;
      f(tmp, k2, ts + 0.5 * h);
      tmp = x + 0.5 * h * k2;
      f(tmp, k3, ts + 0.5 * h);
      tmp = x + h * k3;
      f(tmp, k4, ts + h);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      const double norm = x.norm();
      if (!(norm <= options.overflow_guard)) {
        std::ostringstream msg;
        msg << system.id << ": trajectory diverged (|x| > " << options.overflow_guard
            << ") at t=" << ts + h;
        throw DivergenceError(msg.str(), ts + h);
      }
    }
    t = grid[i];
    traj.states.row(i) = x.transpose();
    f(x, k1, t);
    derivs.row(i) = k1.transpose();
  }
  traj.derivs = std::move(derivs);
  return traj;
}

Mat estimate_derivatives(const Mat& states, const TimeGrid& grid) {
  const Eigen::Index T = states.rows();
  if (T < 3) throw InvalidArgument("estimate_derivatives: need at least 3 grid points");
  if (grid.size() != T) throw InvalidArgument("estimate_derivatives: grid/state length mismatch");
  if (!grid.is_uniform()) throw InvalidArgument("estimate_derivatives: grid must be uniform");
  const double h = grid.spacing();
  Mat d(T, states.cols());
  d.row(0) = (-3.0 * states.row(0) + 4.0 * states.row(1) - states.row(2)) / (2.0 * h);
  for (Eigen::Index t = 1; t + 1 < T; ++t)
    d.row(t) = (states.row(t + 1) - states.row(t - 1)) / (2.0 * h);
  d.row(T - 1) =
      (3.0 * states.row(T - 1) - 4.0 * states.row(T - 2) + states.row(T - 3)) / (2.0 * h);
  return d;
}

Mat estimate_derivatives(const Trajectory& traj) { return estimate_derivatives(traj.states, traj.grid); }

int dct_keep_count(int length, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw InvalidArgument("keep_fraction must lie in (0, 1]");
  if (length < 1) throw InvalidArgument("DCT needs at least one sample");
  const int keep = static_cast<int>(std::ceil(keep_fraction * length - 1e-9));
  return std::clamp(keep, 1, length);
}

Mat dct_basis(int length, int keep) {
  Mat c(length, keep);
  const double s0 = std::sqrt(1.0 / length);
  const double sk = std::sqrt(2.0 / length);
  for (int n = 0; n < length; ++n)
    for (int k = 0; k < keep; ++k)
      c(n, k) = (k == 0 ? s0 : sk) *
                std::cos(std::numbers::pi * k * (2.0 * n + 1.0) / (2.0 * length));
  return c;
}

Mat dct_truncate(const Mat& series, double keep_fraction) {
  const int T = static_cast<int>(series.rows());
  const int keep = dct_keep_count(T, keep_fraction);
  return dct_basis(T, keep).transpose() * series;
}

Mat idct_expand(const Mat& coeffs, int length) {
  const int keep = static_cast<int>(coeffs.rows());
  if (keep < 1 || keep > length) throw InvalidArgument("idct_expand: bad coefficient count");
  return dct_basis(length, keep) * coeffs;
}

namespace {

nlohmann::json matrix_rows(const Mat& m) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    arr.push_back(std::move(row));
  }
  return arr;
}

Mat matrix_from_rows(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw InvalidArgument(std::string(what) + " must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw InvalidArgument(std::string(what) + " rows must have equal length");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

nlohmann::json trajectory_to_json(const Trajectory& traj) {
  nlohmann::json j;
  j["system_id"] = traj.system_id;
  if (traj.theta_truth) j["theta"] = std::vector<double>(traj.theta_truth->begin(), traj.theta_truth->end());
  j["grid"] = {{"t0", traj.grid.t0()}, {"t_max", traj.grid.t_max()}, {"T", traj.grid.size()}};
  j["states"] = matrix_rows(traj.states);
  if (traj.derivs) j["derivs"] = matrix_rows(*traj.derivs);
  return j;
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
  try {
    Trajectory traj;
    traj.system_id = j.at("system_id").get<std::string>();
    if (j.contains("theta")) {
      const auto v = j.at("theta").get<std::vector<double>>();
      traj.theta_truth = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    const auto& g = j.at("grid");
    traj.grid = TimeGrid::uniform(g.at("t0").get<double>(), g.at("t_max").get<double>(),
                                  g.at("T").get<int>());
    traj.states = matrix_from_rows(j.at("states"), "states");
    if (traj.states.rows() != traj.grid.size())
      throw InvalidArgument("trajectory states do not match grid length");
    if (j.contains("derivs")) {
      traj.derivs = matrix_from_rows(j.at("derivs"), "derivs");
      if (traj.derivs->rows() != traj.states.rows() || traj.derivs->cols() != traj.states.cols())
        throw InvalidArgument("trajectory derivs shape differs from states");
    }
    return traj;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed trajectory record: ") + e.what());
  }
}

void write_trajectories_jsonl(const std::filesystem::path& path,
                              const std::vector<Trajectory>& trajectories) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& t : trajectories) out << trajectory_to_json(t).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<Trajectory> read_trajectories_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<Trajectory> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidArgument(std::string("bad JSON line: ") + e.what());
    }
    out.push_back(trajectory_from_json(j));
  }
  return out;
}

}  // namespace dynident
