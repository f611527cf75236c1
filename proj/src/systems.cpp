#include "dynident/systems.hpp"

#include "dynident/errors.hpp"
#include "dynident/rng.hpp"
#include "dynident/solver.hpp"

#include <cmath>
#include <sstream>

namespace dynident {

Vec OdeSystem::box_midpoint() const {
  Vec m(param_dim);
  for (int i = 0; i < param_dim; ++i) m[i] = param_box[static_cast<std::size_t>(i)].mid();
  return m;
}

Vec OdeSystem::box_lower() const {
  Vec m(param_dim);
  for (int i = 0; i < param_dim; ++i) m[i] = param_box[static_cast<std::size_t>(i)].lo;
  return m;
}

Vec OdeSystem::box_upper() const {
  Vec m(param_dim);
  for (int i = 0; i < param_dim; ++i) m[i] = param_box[static_cast<std::size_t>(i)].hi;
  return m;
}

bool OdeSystem::in_box(const Vec& theta, double slack) const {
  if (theta.size() != param_dim) return false;
  for (int i = 0; i < param_dim; ++i) {
    const auto& b = param_box[static_cast<std::size_t>(i)];
    if (!(theta[i] >= b.lo - slack && theta[i] <= b.hi + slack)) return false;
  }
  return true;
}

namespace {

using In = std::span<const double>;
using Out = std::span<double>;

std::vector<Interval> scaled_box(const Vec& canonical, double lo_factor, double hi_factor) {
  std::vector<Interval> box;
  for (Eigen::Index i = 0; i < canonical.size(); ++i) {
    double a = lo_factor * canonical[i];
    double b = hi_factor * canonical[i];
    if (a > b) std::swap(a, b);
    box.push_back({a, b});
  }
  return box;
}

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

OdeSystem make(std::string id, std::string name, int d, Vec canonical, Vec x0,
               double t_max, int grid_points, FieldFn field,
               std::optional<LinearStructure> linear = std::nullopt, bool chaotic = false) {
  OdeSystem s;
  s.id = std::move(id);
  s.name = std::move(name);
  s.state_dim = d;
  s.param_dim = static_cast<int>(canonical.size());
  s.field = std::move(field);
  s.linear = std::move(linear);
  s.chaotic = chaotic;
  s.param_box = chaotic ? scaled_box(canonical, 0.95, 1.05) : scaled_box(canonical, 0.5, 2.0);
  s.canonical_theta = std::move(canonical);
  s.x0 = std::move(x0);
  s.t_max = t_max;
  s.grid_points = grid_points;
  return s;
}

std::vector<OdeSystem> build_catalog() {
  std::vector<OdeSystem> c;

  c.push_back(make(
      "ode2", "Population growth (naive)", 1, vec({0.5}), vec({1.0}), 5.0, 101,
      [](In th, In x, Out dx) { dx[0] = th[0] * x[0]; },
      LinearStructure{{[](In x, Out o) { o[0] = x[0]; }}, {}}));

  c.push_back(make(
      "ode3", "Population growth with carrying capacity", 1, vec({1.0, 2.0}), vec({0.2}), 10.0,
      101, [](In th, In x, Out dx) { dx[0] = th[0] * x[0] * (1.0 - x[0] / th[1]); }));

  c.push_back(make(
      "ode5", "Velocity of a falling object with air resistance", 1, vec({2.0, 0.5}),
      vec({0.1}), 5.0, 101, [](In th, In x, Out dx) { dx[0] = th[0] - th[1] * x[0] * x[0]; },
      LinearStructure{{[](In, Out o) { o[0] = 1.0; }, [](In x, Out o) { o[0] = -x[0] * x[0]; }},
                      {}}));

  c.push_back(make(
      "ode6", "Autocatalysis with one fixed abundant chemical", 1, vec({1.0, 0.5}), vec({0.2}),
      10.0, 101, [](In th, In x, Out dx) { dx[0] = th[0] * x[0] - th[1] * x[0] * x[0]; },
      LinearStructure{{[](In x, Out o) { o[0] = x[0]; }, [](In x, Out o) { o[0] = -x[0] * x[0]; }},
                      {}}));

  c.push_back(make(
      "ode24", "Harmonic oscillator without damping", 2, vec({1.0}), vec({1.0, 0.0}), 10.0, 101,
      [](In th, In x, Out dx) {
        dx[0] = x[1];
        dx[1] = -th[0] * x[0];
      },
      LinearStructure{{[](In x, Out o) {
                        o[0] = 0.0;
                        o[1] = -x[0];
                      }},
                      [](In x, Out o) {
                        o[0] = x[1];
                        o[1] = 0.0;
                      }}));

  c.push_back(make(
      "ode25", "Harmonic oscillator with damping", 2, vec({1.0, 0.3}), vec({1.0, 0.0}), 10.0, 101,
      [](In th, In x, Out dx) {
        dx[0] = x[1];
        dx[1] = -th[0] * x[0] - th[1] * x[1];
      },
      LinearStructure{{[](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = -x[0];
                       },
                       [](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = -x[1];
                       }},
                      [](In x, Out o) {
                        o[0] = x[1];
                        o[1] = 0.0;
                      }}));

  c.push_back(make(
      "ode27", "Lotka-Volterra simple", 2, vec({1.0, 0.5, 1.0, 0.5}), vec({1.0, 1.0}), 10.0,
      101,
      [](In th, In x, Out dx) {
        dx[0] = x[0] * (th[0] - th[1] * x[1]);
        dx[1] = -x[1] * (th[2] - th[3] * x[0]);
      },
      LinearStructure{{[](In x, Out o) {
                         o[0] = x[0];
                         o[1] = 0.0;
                       },
                       [](In x, Out o) {
                         o[0] = -x[0] * x[1];
                         o[1] = 0.0;
                       },
                       [](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = -x[1];
                       },
                       [](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = x[0] * x[1];
                       }},
                      {}}));

  c.push_back(make(
      "ode28", "Pendulum without friction", 2, vec({1.0}), vec({1.0, 0.0}), 10.0, 101,
      [](In th, In x, Out dx) {
        dx[0] = x[1];
        dx[1] = -th[0] * std::sin(x[0]);
      },
      LinearStructure{{[](In x, Out o) {
                        o[0] = 0.0;
                        o[1] = -std::sin(x[0]);
                      }},
                      [](In x, Out o) {
                        o[0] = x[1];
                        o[1] = 0.0;
                      }}));

  c.push_back(make(
      "ode31", "SIR infection model only for healthy and sick", 2, vec({1.0, 0.3}),
      vec({0.99, 0.01}), 20.0, 101,
      [](In th, In x, Out dx) {
        dx[0] = -th[0] * x[0] * x[1];
        dx[1] = th[0] * x[0] * x[1] - th[1] * x[1];
      },
      LinearStructure{{[](In x, Out o) {
                         o[0] = -x[0] * x[1];
                         o[1] = x[0] * x[1];
                       },
                       [](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = -x[1];
                       }},
                      {}}));

  c.push_back(make(
      "ode50", "Chemical oscillator model by Schnackenberg 1979", 2, vec({0.1, 0.9}),
      vec({1.0, 1.0}), 10.0, 101,
      [](In th, In x, Out dx) {
        dx[0] = th[0] + x[0] * x[0] * x[1] - x[0];
        dx[1] = th[1] - x[0] * x[0] * x[1];
      },
      LinearStructure{{[](In, Out o) {
                         o[0] = 1.0;
                         o[1] = 0.0;
                       },
                       [](In, Out o) {
                         o[0] = 0.0;
                         o[1] = 1.0;
                       }},
                      [](In x, Out o) {
                        o[0] = x[0] * x[0] * x[1] - x[0];
                        o[1] = -x[0] * x[0] * x[1];
                      }}));

  c.push_back(make(
      "ode56", "Lorenz equations (chaotic)", 3, vec({10.0, 28.0, 8.0 / 3.0}),
      vec({1.0, 1.0, 1.0}), 2.0, 201,
      [](In th, In x, Out dx) {
        dx[0] = th[0] * (x[1] - x[0]);
        dx[1] = th[1] * x[0] - x[0] * x[2] - x[1];
        dx[2] = x[0] * x[1] - th[2] * x[2];
      },
      LinearStructure{{[](In x, Out o) {
                         o[0] = x[1] - x[0];
                         o[1] = 0.0;
                         o[2] = 0.0;
                       },
                       [](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = x[0];
                         o[2] = 0.0;
                       },
                       [](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = 0.0;
                         o[2] = -x[2];
                       }},
                      [](In x, Out o) {
                        o[0] = 0.0;
                        o[1] = -x[0] * x[2] - x[1];
                        o[2] = x[0] * x[1];
                      }},
      /*chaotic=*/true));

  c.push_back(make(
      "ode63", "SEIR infection model (proportions)", 4, vec({0.5, 1.0, 0.3}),
      vec({0.99, 0.0, 0.01, 0.0}), 20.0, 101,
      [](In th, In x, Out dx) {
        dx[0] = -th[1] * x[0] * x[2];
        dx[1] = -th[0] * x[1] + th[1] * x[0] * x[2];
        dx[2] = th[0] * x[1] - th[2] * x[2];
        dx[3] = th[2] * x[2];
      },
      LinearStructure{{[](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = -x[1];
                         o[2] = x[1];
                         o[3] = 0.0;
                       },
                       [](In x, Out o) {
                         o[0] = -x[0] * x[2];
                         o[1] = x[0] * x[2];
                         o[2] = 0.0;
                         o[3] = 0.0;
                       },
                       [](In x, Out o) {
                         o[0] = 0.0;
                         o[1] = 0.0;
                         o[2] = -x[2];
                         o[3] = x[2];
                       }},
                      {}}));

  // State (cart position, cart velocity, pole angle, pole angular velocity);
  // theta = (force F, pole mass m_p, pole half-length l). Cart mass 1, g = 9.81.
  c.push_back(make(
      "cartpole", "Cart-Pole (inverted pendulum)", 4, vec({1.0, 0.1, 0.5}),
      vec({0.0, 0.0, 0.1, 0.0}), 3.0, 101, [](In th, In x, Out dx) {
        constexpr double cart_mass = 1.0;
        constexpr double g = 9.81;
        const double force = th[0];
        const double pole_mass = th[1];
        const double length = th[2];
        const double total = cart_mass + pole_mass;
        const double s = std::sin(x[2]);
        const double co = std::cos(x[2]);
        const double w = x[3];
        const double tmp = (force + pole_mass * length * w * w * s) / total;
        const double alpha_acc =
            (g * s - co * tmp) / (length * (4.0 / 3.0 - pole_mass * co * co / total));
        const double x_acc = tmp - pole_mass * length * alpha_acc * co / total;
        dx[0] = x[1];
        dx[1] = x_acc;
        dx[2] = w;
        dx[3] = alpha_acc;
      }));

  return c;
}

void require_dims(const OdeSystem& system, const Vec& theta, const Vec& x) {
  if (theta.size() != system.param_dim || x.size() != system.state_dim) {
    std::ostringstream msg;
    msg << system.id << ": expected theta of size " << system.param_dim << " and x of size "
        << system.state_dim << ", got " << theta.size() << " and " << x.size();
    throw InvalidArgument(msg.str());
  }
}

}  // namespace

const std::vector<OdeSystem>& catalog() {
  static const std::vector<OdeSystem> systems = build_catalog();
  return systems;
}

bool has_system(const std::string& id) {
  for (const auto& s : catalog())
    if (s.id == id) return true;
  return false;
}

const OdeSystem& find_system(const std::string& id) {
  for (const auto& s : catalog())
    if (s.id == id) return s;
  throw InvalidArgument("unknown system id '" + id + "'");
}

OdeSystem with_param_box(const OdeSystem& system, std::vector<Interval> box) {
  if (static_cast<int>(box.size()) != system.param_dim)
    throw InvalidArgument(system.id + ": parameter box has wrong dimension");
  for (const auto& b : box)
    if (!(b.lo <= b.hi)) throw InvalidArgument(system.id + ": parameter box with lo > hi");
  OdeSystem copy = system;
  copy.param_box = std::move(box);
  return copy;
}

Vec eval_vector_field(const OdeSystem& system, const Vec& theta, const Vec& x) {
  require_dims(system, theta, x);
  if (!theta.allFinite() || !x.allFinite())
    throw InvalidArgument(system.id + ": non-finite theta or state");
  Vec dx(system.state_dim);
  system.field({theta.data(), static_cast<std::size_t>(theta.size())},
               {x.data(), static_cast<std::size_t>(x.size())},
               {dx.data(), static_cast<std::size_t>(dx.size())});
  if (!dx.allFinite()) throw NumericDomainError(system.id + ": non-finite vector field output");
  return dx;
}

std::vector<ParameterDraw> sample_parameters(const OdeSystem& system, int n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("sample_parameters: n must be >= 1");
  std::vector<ParameterDraw> draws;
  draws.reserve(static_cast<std::size_t>(n));
  const std::uint64_t stream = derive_seed(seed, system.id);
  for (int i = 0; i < n; ++i) {
    Rng rng = make_rng(derive_seed(stream, static_cast<std::uint64_t>(i)));
    Vec theta(system.param_dim);
    for (int k = 0; k < system.param_dim; ++k) {
      const auto& b = system.param_box[static_cast<std::size_t>(k)];
      theta[k] = b.lo == b.hi ? b.lo : uniform(rng, b.lo, b.hi);
    }
    draws.push_back({system.id, std::move(theta), seed, i});
  }
  return draws;
}

Mat basis_matrix(const OdeSystem& system, const Mat& states) {
  if (!system.linear)
    throw UnsupportedOperation(system.id + ": system has no linear-in-theta basis");
  if (states.cols() != system.state_dim)
    throw InvalidArgument(system.id + ": trajectory state dimension mismatch");
  const auto& basis = system.linear->basis;
  const Eigen::Index T = states.rows();
  const int d = system.state_dim;
  Mat phi(static_cast<Eigen::Index>(basis.size()), T * d);
  Vec x(d), out(d);
  for (Eigen::Index t = 0; t < T; ++t) {
    x = states.row(t).transpose();
    for (std::size_t i = 0; i < basis.size(); ++i) {
      basis[i]({x.data(), static_cast<std::size_t>(d)}, {out.data(), static_cast<std::size_t>(d)});
      phi.block(static_cast<Eigen::Index>(i), t * d, 1, d) = out.transpose();
    }
  }
  return phi;
}

Mat basis_matrix(const OdeSystem& system, const Trajectory& traj) {
  return basis_matrix(system, traj.states);
}

Vec offset_vector(const OdeSystem& system, const Mat& states) {
  const int d = system.state_dim;
  Vec off = Vec::Zero(states.rows() * d);
  if (!system.linear || !system.linear->offset) return off;
  Vec x(d), out(d);
  for (Eigen::Index t = 0; t < states.rows(); ++t) {
    x = states.row(t).transpose();
    system.linear->offset({x.data(), static_cast<std::size_t>(d)},
                          {out.data(), static_cast<std::size_t>(d)});
    off.segment(t * d, d) = out;
  }
  return off;
}

}  // namespace dynident
