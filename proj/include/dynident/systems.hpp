#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dynident {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// (theta, x) -> dx, all in model units.
using FieldFn = std::function<void(std::span<const double> theta,
                                   std::span<const double> x,
                                   std::span<double> dx)>;

// x -> d-vector. Used both for basis functions and for the parameter-free
// offset of affine-in-theta fields.
using StateFn = std::function<void(std::span<const double> x, std::span<double> out)>;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double mid() const { return 0.5 * (lo + hi); }
};

// field(theta, x) = offset(x) + sum_i theta_i * basis[i](x)
struct LinearStructure {
  std::vector<StateFn> basis;
  StateFn offset;  // empty when the field is purely linear in theta
};

struct OdeSystem {
  std::string id;
  std::string name;
  int state_dim = 0;
  int param_dim = 0;
  FieldFn field;
  std::vector<Interval> param_box;
  std::optional<LinearStructure> linear;
  bool chaotic = false;

  // Catalog defaults for experiments built on this system.
  Vec canonical_theta;
  Vec x0;
  double t_max = 1.0;
  int grid_points = 101;

  bool has_basis() const { return linear.has_value(); }
  Vec box_midpoint() const;
  Vec box_lower() const;
  Vec box_upper() const;
  bool in_box(const Vec& theta, double slack = 0.0) const;
};

struct ParameterDraw {
  std::string system_id;
  Vec theta;
  std::uint64_t seed = 0;
  int draw_index = 0;
};

inline constexpr const char* kCatalogVersion = "dynident-catalog/1";

const std::vector<OdeSystem>& catalog();
const OdeSystem& find_system(const std::string& id);
bool has_system(const std::string& id);

// Same system with a replaced sampling box. Unlike catalog boxes, lo == hi is
// allowed here (degenerate boxes pin a component).
OdeSystem with_param_box(const OdeSystem& system, std::vector<Interval> box);

Vec eval_vector_field(const OdeSystem& system, const Vec& theta, const Vec& x);

std::vector<ParameterDraw> sample_parameters(const OdeSystem& system, int n,
                                             std::uint64_t seed);

struct Trajectory;

// m x (T*d) matrix; column t*d + c holds component c at grid time t.
Mat basis_matrix(const OdeSystem& system, const Trajectory& traj);
Mat basis_matrix(const OdeSystem& system, const Mat& states);

// Parameter-free part of the field along the trajectory, flattened like
// basis_matrix columns. Zero when the structure has no offset.
Vec offset_vector(const OdeSystem& system, const Mat& states);

}  // namespace dynident
