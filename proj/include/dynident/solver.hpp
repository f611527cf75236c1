#pragma once

#include "dynident/systems.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace dynident {

class TimeGrid {
 public:
  TimeGrid() = default;
  // Throws InvalidArgument unless points are strictly increasing.
  explicit TimeGrid(std::vector<double> points);
  static TimeGrid uniform(double t0, double t_max, int count);

  const std::vector<double>& points() const { return points_; }
  int size() const { return static_cast<int>(points_.size()); }
  double t0() const { return points_.front(); }
  double t_max() const { return points_.back(); }
  double operator[](int i) const { return points_[static_cast<std::size_t>(i)]; }

  bool is_uniform(double rel_tol = 1e-9) const;
  double spacing() const;  // uniform grids only

 private:
  std::vector<double> points_;
};

TimeGrid default_grid(const OdeSystem& system);

struct Trajectory {
  std::string system_id;
  std::optional<Vec> theta_truth;
  TimeGrid grid;
  Mat states;                 // T x d
  std::optional<Mat> derivs;  // T x d

  int length() const { return static_cast<int>(states.rows()); }
  int dim() const { return static_cast<int>(states.cols()); }
};

struct IntegrateOptions {
  double h_int = 0.0;  // <= 0 selects (t_max - t0) / (50 T)
  double overflow_guard = 1e8;
};

double default_substep(const TimeGrid& grid);

// Classical RK4 with fixed substeps; every grid point is hit exactly.
Trajectory integrate(const OdeSystem& system, const Vec& theta, const Vec& x0,
                     const TimeGrid& grid, const IntegrateOptions& options = {});

// Second-order central differences inside, one-sided second order at the ends.
Mat estimate_derivatives(const Mat& states, const TimeGrid& grid);
Mat estimate_derivatives(const Trajectory& traj);

int dct_keep_count(int length, double keep_fraction);
// Orthonormal DCT-II per column, truncated to the lowest frequencies.
Mat dct_truncate(const Mat& series, double keep_fraction);
// Zero-pads to `length` rows and applies the orthonormal inverse (DCT-III).
Mat idct_expand(const Mat& coeffs, int length);
// Dense (length x keep) matrix C with dct_truncate(x) = C^T x.
Mat dct_basis(int length, int keep);

// JSON-lines persistence.
nlohmann::json trajectory_to_json(const Trajectory& traj);
Trajectory trajectory_from_json(const nlohmann::json& j);
void write_trajectories_jsonl(const std::filesystem::path& path,
                              const std::vector<Trajectory>& trajectories);
std::vector<Trajectory> read_trajectories_jsonl(const std::filesystem::path& path);

}  // namespace dynident
