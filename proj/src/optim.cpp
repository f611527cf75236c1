#include "dynident/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dynident::optim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sq_loss(const std::optional<Vec>& r) {
  if (!r || !r->allFinite()) return kInf;
  return r->squaredNorm();
}

}  // namespace

Mat forward_difference_jacobian(const ResidualFn& residual, const Vec& x, const Vec& r0) {
  const double sqrt_eps = std::sqrt(std::numeric_limits<double>::epsilon());
  Mat jac(r0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = sqrt_eps * std::max(std::abs(x[j]), 1.0);
    Vec xp = x;
    xp[j] += h;
    auto rp = residual(xp);
    if (rp && rp->allFinite()) {
      jac.col(j) = (*rp - r0) / (xp[j] - x[j]);
      continue;
    }
    xp[j] = x[j] - h;
    auto rm = residual(xp);
    if (rm && rm->allFinite())
      jac.col(j) = (r0 - *rm) / (x[j] - xp[j]);
    else
      jac.col(j).setZero();
  }
  return jac;
}

OptimResult levenberg_marquardt(const ResidualFn& residual, const Vec& x0,
                                const LmOptions& options, const Projector& project) {
  OptimResult out;
  out.x = project ? project(x0) : x0;
  auto r0 = residual(out.x);
  out.loss = sq_loss(r0);
  if (!std::isfinite(out.loss)) {
    out.stalled = true;
    return out;
  }
  Vec r = std::move(*r0);
  double lambda = options.lambda0;

  for (int it = 0; it < options.max_iter; ++it) {
    if (out.loss == 0.0) {
      out.converged = true;
      return out;
    }
    const Mat jac = forward_difference_jacobian(residual, out.x, r);
    const Mat a = jac.transpose() * jac;
    const Vec g = jac.transpose() * r;
    Vec scale = a.diagonal();
    const double floor = std::max(1e-12 * scale.maxCoeff(), 1e-300);
    scale = scale.cwiseMax(floor);
    out.iterations = it + 1;

    while (true) {
      Mat m = a;
      m.diagonal() += lambda * scale;
      Vec delta = m.ldlt().solve(-g);
      if (!delta.allFinite()) delta = m.completeOrthogonalDecomposition().solve(-g);
      Vec xn = out.x + delta;
      if (project) xn = project(xn);
      const double step = (xn - out.x).norm();
      if (step <= options.step_tol * (out.x.norm() + options.step_tol)) {
        out.converged = true;
        return out;
      }
      auto rn = residual(xn);
      const double loss_n = sq_loss(rn);
      if (loss_n < out.loss) {
        const double rel_decrease = (out.loss - loss_n) / out.loss;
        const double rel_step = step / (out.x.norm() + std::numeric_limits<double>::min());
        out.x = std::move(xn);
        r = std::move(*rn);
        out.loss = loss_n;
        lambda = std::max(lambda / options.lambda_down, 1e-15);
        if (rel_step < options.step_tol || rel_decrease < options.loss_tol) {
          out.converged = true;
          return out;
        }
        break;
      }
      lambda *= options.lambda_up;
      if (lambda > options.lambda_max) {
        out.stalled = true;
        return out;
      }
    }
  }
  return out;
}

OptimResult nelder_mead(const ObjectiveFn& objective, const Vec& x0,
                        const NelderMeadOptions& options, const Projector& project) {
  const Eigen::Index n = x0.size();
  auto proj = [&](Vec x) { return project ? project(x) : x; };
  auto eval = [&](const Vec& x) {
    const double f = objective(x);
    return std::isfinite(f) ? f : kInf;
  };

  std::vector<Vec> simplex;
  std::vector<double> values;
  simplex.push_back(proj(x0));
  values.push_back(eval(simplex[0]));
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec v = simplex[0];
    const double step = options.initial_step * std::max(std::abs(v[i]), 1.0);
    v[i] += step;
    v = proj(v);
    if (v == simplex[0]) {  // pinned at the upper bound
      v[i] -= 2.0 * step;
      v = proj(v);
    }
    simplex.push_back(v);
    values.push_back(eval(v));
  }

  OptimResult out;
  std::vector<std::size_t> order(simplex.size());
  for (int it = 0; it < options.max_iter; ++it) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];
    out.iterations = it;

    double diameter = 0.0;
    for (const auto& v : simplex) diameter = std::max(diameter, (v - simplex[best]).norm());
    const double spread = values[worst] - values[best];
    if ((std::isfinite(spread) && spread <= options.f_tol * std::abs(values[best]) + 1e-300) ||
        diameter <= options.x_tol * (1.0 + simplex[best].norm())) {
      out.converged = true;
      break;
    }

    Vec centroid = Vec::Zero(n);
    for (std::size_t i : order)
      if (i != worst) centroid += simplex[i];
    centroid /= static_cast<double>(n);

    const Vec xr = proj(centroid + options.reflection * (centroid - simplex[worst]));
    const double fr = eval(xr);
    if (fr < values[best]) {
      const Vec xe = proj(centroid + options.expansion * (xr - centroid));
      const double fe = eval(xe);
      if (fe < fr) {
        simplex[worst] = xe;
        values[worst] = fe;
      } else {
        simplex[worst] = xr;
        values[worst] = fr;
      }
      continue;
    }
    if (fr < values[second]) {
      simplex[worst] = xr;
      values[worst] = fr;
      continue;
    }
    const bool outside = fr < values[worst];
    const Vec xc = outside ? proj(centroid + options.contraction * (xr - centroid))
                           : proj(centroid + options.contraction * (simplex[worst] - centroid));
    const double fc = eval(xc);
    if (fc < (outside ? fr : values[worst])) {
      simplex[worst] = xc;
      values[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i < simplex.size(); ++i) {
      if (i == best) continue;
      simplex[i] = proj(simplex[best] + options.shrink * (simplex[i] - simplex[best]));
      values[i] = eval(simplex[i]);
    }
  }

  const auto best_it = std::min_element(values.begin(), values.end());
  out.x = simplex[static_cast<std::size_t>(best_it - values.begin())];
  out.loss = *best_it;
  return out;
}

}  // namespace dynident::optim
