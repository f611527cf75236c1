#include "dynident/eval_causal.hpp"

#include "dynident/errors.hpp"
#include "dynident/rng.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace dynident {

namespace {

void column_stats(const Mat& x, Vec& mean, Vec& scale) {
  const double n = static_cast<double>(std::max<Eigen::Index>(x.rows(), 1));
  mean = x.colwise().sum().transpose() / n;
  scale = ((x.rowwise() - mean.transpose()).array().square().colwise().sum() / n).sqrt().matrix().transpose();
  for (Eigen::Index c = 0; c < scale.size(); ++c)
    if (!(scale[c] > 1e-12)) scale[c] = 1.0;
}

Mat apply_standardize(const Mat& x, const Vec& mean, const Vec& scale) {
  return ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
}

Mat softmax_rows(const Mat& logits) {
  Mat p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Mat take_rows(const Mat& m, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

template <class T>
std::vector<T> take(const std::vector<T>& v, const std::vector<Eigen::Index>& rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}

}  // namespace

LogisticModel logistic_fit(const Mat& features, const std::vector<int>& labels, const LogisticOptions& options) {
  if (features.rows() != static_cast<Eigen::Index>(labels.size()))
    throw InvalidArgument("logistic_fit: features and labels differ in length");
  if (!features.allFinite()) throw InvalidArgument("logistic_fit: non-finite features");
  const std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2)
    throw DegenerateLabels("logistic_fit: need at least two classes, got " + std::to_string(distinct.size()));

  LogisticModel m;
  m.classes.assign(distinct.begin(), distinct.end());
  column_stats(features, m.mean, m.scale);
  const Mat x = apply_standardize(features, m.mean, m.scale);
  const auto n = x.rows(), p = x.cols();
  const auto k = static_cast<Eigen::Index>(m.classes.size());
  Mat y = Mat::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto it = std::lower_bound(m.classes.begin(), m.classes.end(), labels[static_cast<std::size_t>(i)]);
    y(i, it - m.classes.begin()) = 1.0;
  }

  m.weights = Mat::Zero(p, k);
  m.bias = Vec::Zero(k);
  const double inv_n = 1.0 / static_cast<double>(n);
  auto objective = [&](const Mat& w, const Vec& b) {
    Mat logits = x * w;
    logits.rowwise() += b.transpose();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
      loss += lse - (logits.row(i).array() * y.row(i).array()).sum();
    }
    return loss * inv_n + 0.5 * options.l2 * w.squaredNorm();
  };

  double step = 1.0;
  double f = objective(m.weights, m.bias);
  for (int it = 0; it < options.max_iter; ++it) {
    Mat logits = x * m.weights;
    logits.rowwise() += m.bias.transpose();
    const Mat resid = softmax_rows(logits) - y;
    const Mat gw = inv_n * (x.transpose() * resid) + options.l2 * m.weights;
    const Vec gb = inv_n * resid.colwise().sum().transpose();
    const double g2 = gw.squaredNorm() + gb.squaredNorm();
    m.iterations = it;
    if (std::sqrt(g2) < options.grad_tol) break;
    step = std::min(step * 2.0, 64.0);
    while (true) {
      const Mat w_new = m.weights - step * gw;
      const Vec b_new = m.bias - step * gb;
      const double f_new = objective(w_new, b_new);
      if (f_new <= f - 1e-4 * step * g2) {
        m.weights = w_new;
        m.bias = b_new;
        f = f_new;
        break;
      }
      step *= 0.5;
      if (step < 1e-12) return m;
    }
  }
  return m;
}

Mat logistic_proba(const LogisticModel& model, const Mat& features) {
  if (features.cols() != model.weights.rows())
    throw InvalidArgument("logistic_predict: feature dimension mismatch");
  Mat logits = apply_standardize(features, model.mean, model.scale) * model.weights;
  logits.rowwise() += model.bias.transpose();
  return softmax_rows(logits);
}

std::vector<int> logistic_predict(const LogisticModel& model, const Mat& features) {
  const Mat p = logistic_proba(model, features);
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index best = 0;
    p.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = model.classes[static_cast<std::size_t>(best)];
  }
  return out;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size() || truth.empty())
    throw InvalidArgument("accuracy: label vectors must be nonempty and equally long");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

std::vector<int> median_split(const Vec& values) {
  if (values.size() == 0) return {};
  std::vector<double> v(values.begin(), values.end());
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double med = v[mid];
  if (v.size() % 2 == 0)
    med = 0.5 * (med + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  std::vector<int> out;
  for (double x : values) out.push_back(x > med ? 1 : 0);
  return out;
}

Split train_test_split(Eigen::Index n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw InvalidArgument("train_test_split: test_fraction must be in (0, 1)");
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng(derive_seed(seed, "split"));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng() % i)]);
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, perm.size() > 1 ? perm.size() - 1 : 1);
  if (n < 2) throw InvalidArgument("train_test_split: need at least two rows");
  Split s;
  s.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  return s;
}

PartitionAccuracyMatrix partition_accuracy(const Mat& latents, const PartitionLayout& layout,
                                           const std::vector<std::vector<int>>& factor_labels,
                                           std::uint64_t seed, double test_fraction) {
  layout.validate();
  if (latents.cols() != layout.latent_dim)
    throw InvalidArgument("partition_accuracy: latents do not match the layout");
  for (const auto& f : factor_labels)
    if (static_cast<Eigen::Index>(f.size()) != latents.rows())
      throw InvalidArgument("partition_accuracy: labels and latents differ in length");
  const auto split = train_test_split(latents.rows(), test_fraction, seed);

  PartitionAccuracyMatrix out;
  out.accuracy = Mat::Zero(static_cast<Eigen::Index>(layout.blocks.size()),
                           static_cast<Eigen::Index>(factor_labels.size()));
  for (std::size_t f = 0; f < factor_labels.size(); ++f) {
    const auto train_y = take(factor_labels[f], split.train);
    const auto test_y = take(factor_labels[f], split.test);
    const std::set<int> distinct(train_y.begin(), train_y.end());
    for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
      const auto& idx = layout.blocks[b];
      Mat block(latents.rows(), static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) block.col(static_cast<Eigen::Index>(k)) = latents.col(idx[k]);
      double acc;
      if (distinct.size() < 2) {
        const int only = *distinct.begin();
        acc = accuracy(std::vector<int>(test_y.size(), only), test_y);
      } else {
        const auto model = logistic_fit(take_rows(block, split.train), train_y);
        acc = accuracy(logistic_predict(model, take_rows(block, split.test)), test_y);
      }
      out.accuracy(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(f)) = acc;
    }
    if (distinct.size() < 2)
      out.warnings.push_back("factor " + std::to_string(f) + ": degenerate labels (single class)");
  }
  return out;
}

R2Result latent_r2(const Mat& block, const Mat& targets, std::uint64_t seed, const KernelRidgeOptions& options) {
  if (block.rows() != targets.rows()) throw InvalidArgument("latent_r2: rows of block and targets differ");
  if (block.cols() < 1 || targets.cols() < 1) throw InvalidArgument("latent_r2: empty block or targets");
  if (!block.allFinite() || !targets.allFinite()) throw InvalidArgument("latent_r2: non-finite input");
  const auto split = train_test_split(block.rows(), options.test_fraction, seed);
  const Mat xtr_raw = take_rows(block, split.train), xte_raw = take_rows(block, split.test);
  const Mat ytr = take_rows(targets, split.train), yte = take_rows(targets, split.test);

  // ZCA whitening from the training rows
  const Vec mu = xtr_raw.colwise().mean().transpose();
  const Mat centered = xtr_raw.rowwise() - mu.transpose();
  const Mat cov = centered.transpose() * centered / static_cast<double>(centered.rows());
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  Vec inv_sqrt(eig.eigenvalues().size());
  for (Eigen::Index i = 0; i < inv_sqrt.size(); ++i) {
    const double ev = eig.eigenvalues()[i];
    inv_sqrt[i] = (top > 0.0 && ev > options.whitening_floor * top) ? 1.0 / std::sqrt(ev) : 0.0;
  }
  const Mat whiten = eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
  const Mat xtr = centered * whiten;
  const Mat xte = (xte_raw.rowwise() - mu.transpose()) * whiten;

  // linear part
  Mat a(xtr.rows(), xtr.cols() + 1);
  a << Mat::Ones(xtr.rows(), 1), xtr;
  const Mat beta = a.colPivHouseholderQr().solve(ytr);
  const Mat resid = ytr - a * beta;

  // RBF kernel ridge on the residual
  const auto ntr = xtr.rows();
  const auto m = std::min<Eigen::Index>(ntr, static_cast<Eigen::Index>(options.bandwidth_sample));
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(m * (m - 1) / 2));
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = i + 1; j < m; ++j) dists.push_back((xtr.row(i) - xtr.row(j)).norm());
  double sigma = 1.0;
  if (!dists.empty()) {
    const auto mid = dists.size() / 2;
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
    if (dists[mid] > 0.0) sigma = dists[mid];
  }
  const double gamma = 1.0 / (2.0 * sigma * sigma);
  auto kernel = [&](const Mat& p, const Mat& q) {
    const Vec pn = p.rowwise().squaredNorm(), qn = q.rowwise().squaredNorm();
    Mat d2 = (-2.0 * p * q.transpose()).colwise() + pn;
    d2.rowwise() += qn.transpose();
    return Mat((-gamma * d2.array().max(0.0)).exp().matrix());
  };
  Mat k = kernel(xtr, xtr);
  k.diagonal().array() += options.ridge;
  const Mat alpha = k.llt().solve(resid);

  Mat ate(xte.rows(), xte.cols() + 1);
  ate << Mat::Ones(xte.rows(), 1), xte;
  const Mat pred = ate * beta + kernel(xte, xtr) * alpha;

  R2Result out;
  for (Eigen::Index c = 0; c < targets.cols(); ++c) {
    const double mean = yte.col(c).mean();
    const double ss_tot = (yte.col(c).array() - mean).square().sum();
    const double ss_res = (yte.col(c) - pred.col(c)).squaredNorm();
    out.per_component.push_back(ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0);
  }
  out.mean = std::accumulate(out.per_component.begin(), out.per_component.end(), 0.0) /
             static_cast<double>(out.per_component.size());
  return out;
}

namespace {

Vec ridge_fit(const Mat& x, const Vec& y, double ridge) {
  Mat a(x.rows(), x.cols() + 1);
  a << Mat::Ones(x.rows(), 1), x;
  Mat g = a.transpose() * a;
  g.diagonal().tail(x.cols()).array() += ridge * static_cast<double>(x.rows());
  return g.ldlt().solve(a.transpose() * y);
}

Vec ridge_predict(const Vec& beta, const Mat& x) { return (x * beta.tail(x.cols())).array() + beta[0]; }

}  // namespace

AteResult aipw_ate(const Vec& outcomes, const std::vector<int>& treatments, const Mat& covariates,
                   const AipwOptions& options) {
  return aipw_ate(outcomes, treatments, covariates, covariates, options);
}

AteResult aipw_ate(const Vec& outcomes, const std::vector<int>& treatments, const Mat& propensity_covariates,
                   const Mat& outcome_covariates, const AipwOptions& options) {
  const auto n = outcomes.size();
  if (static_cast<Eigen::Index>(treatments.size()) != n || propensity_covariates.rows() != n ||
      outcome_covariates.rows() != n)
    throw InvalidArgument("aipw_ate: outcomes, treatments and covariates differ in length");
  if (n < 50) throw InvalidArgument("aipw_ate: need at least 50 units, got " + std::to_string(n));
  if (!outcomes.allFinite()) throw InvalidArgument("aipw_ate: non-finite outcomes");
  std::vector<Eigen::Index> treated, control;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = treatments[static_cast<std::size_t>(i)];
    if (t != 0 && t != 1) throw InvalidArgument("aipw_ate: treatments must be 0 or 1");
    (t ? treated : control).push_back(i);
  }
  if (treated.empty() || control.empty()) throw InvalidArgument("aipw_ate: both treatment arms must be present");

  AteResult out;
  out.n = static_cast<int>(n);
  const auto prop = logistic_fit(propensity_covariates, treatments, options.propensity);
  const Mat p = logistic_proba(prop, propensity_covariates);
  Vec e = p.col(1);  // classes are {0, 1}
  int clipped = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (e[i] < options.clip_lo || e[i] > options.clip_hi) ++clipped;
    e[i] = std::clamp(e[i], options.clip_lo, options.clip_hi);
  }
  out.clipped_fraction = static_cast<double>(clipped) / static_cast<double>(n);
  if (out.clipped_fraction > options.positivity_warning)
    out.warnings.push_back("positivity: " + std::to_string(clipped) + " of " + std::to_string(n) +
                           " propensities clipped");

  auto arm_fit = [&](const std::vector<Eigen::Index>& rows) {
    Mat x(static_cast<Eigen::Index>(rows.size()), outcome_covariates.cols());
    Vec y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = outcome_covariates.row(rows[i]);
      y[static_cast<Eigen::Index>(i)] = outcomes[rows[i]];
    }
    return ridge_fit(x, y, options.outcome_ridge);
  };
  const Vec mu1 = ridge_predict(arm_fit(treated), outcome_covariates);
  const Vec mu0 = ridge_predict(arm_fit(control), outcome_covariates);

  Vec psi(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = treatments[static_cast<std::size_t>(i)];
    psi[i] = mu1[i] - mu0[i] + t * (outcomes[i] - mu1[i]) / e[i] -
             (1.0 - t) * (outcomes[i] - mu0[i]) / (1.0 - e[i]);
  }
  out.ate_hat = psi.mean();
  out.se_hat = std::sqrt((psi.array() - out.ate_hat).square().sum() / static_cast<double>(n - 1)) /
               std::sqrt(static_cast<double>(n));
  return out;
}

AteTrend ate_trend(const std::vector<CausalSlice>& slices, const AipwOptions& options) {
  if (slices.size() < 2) throw InvalidArgument("ate_trend: need at least two slices");
  AteTrend out;
  for (const auto& s : slices) out.per_slice.push_back(aipw_ate(s.outcomes, s.treatments, s.covariates, options));
  const double base = out.per_slice.front().ate_hat;
  for (const auto& r : out.per_slice)
    out.change_ratios.push_back(base != 0.0 ? (r.ate_hat - base) / base : std::numeric_limits<double>::quiet_NaN());
  return out;
}

std::vector<double> isotonic_fit(const std::vector<double>& values) {
  std::vector<double> level;
  std::vector<std::size_t> weight;
  for (double v : values) {
    level.push_back(v);
    weight.push_back(1);
    while (level.size() > 1 && level[level.size() - 2] > level.back()) {
      const auto w = weight[weight.size() - 2] + weight.back();
      const double merged = (level[level.size() - 2] * static_cast<double>(weight[weight.size() - 2]) +
                             level.back() * static_cast<double>(weight.back())) /
                            static_cast<double>(w);
      level.pop_back();
      weight.pop_back();
      level.back() = merged;
      weight.back() = w;
    }
  }
  std::vector<double> out;
  for (std::size_t b = 0; b < level.size(); ++b) out.insert(out.end(), weight[b], level[b]);
  return out;
}

double design_ate(const CausalDesign& design, int slice) { return design.base_ate * (1.0 + design.growth * slice); }

void attach_causal_labels(MultiviewDataset& dataset, const OdeSystem& system, const CausalDesign& design,
                          std::uint64_t seed) {
  if (design.n_slices < 1) throw InvalidArgument("causal design: n_slices must be >= 1");
  const std::uint64_t root = derive_seed(seed, "causal.labels");
  for (std::size_t i = 0; i < dataset.pairs.size(); ++i) {
    auto& pair = dataset.pairs[i];
    const Vec& theta = *pair.views.front().theta_truth;
    std::vector<double> u;
    for (int k : pair.shared_indices) {
      const auto& b = system.param_box.at(static_cast<std::size_t>(k));
      u.push_back(b.hi > b.lo ? 2.0 * (theta[k] - b.lo) / (b.hi - b.lo) - 1.0 : 0.0);
    }
    const double c0 = u.empty() ? 0.0 : u[0];
    const double c1 = u.size() > 1 ? u[1] : 0.0;
    Rng rng = make_rng(derive_seed(root, static_cast<std::uint64_t>(i)));
    CausalLabels lab;
    lab.slice = static_cast<int>(i % static_cast<std::size_t>(design.n_slices));
    const double e = 1.0 / (1.0 + std::exp(-1.5 * c0));
    lab.treatment = uniform(rng, 0.0, 1.0) < e ? 1 : 0;
    lab.outcome = design_ate(design, lab.slice) * lab.treatment + c0 + 0.5 * c1 +
                  design.noise * standard_normal(rng);
    pair.causal = lab;
  }
}

std::vector<CausalSlice> causal_slices(const MultiviewDataset& dataset, const Mat& covariates) {
  if (covariates.rows() != static_cast<Eigen::Index>(dataset.pairs.size()))
    throw InvalidArgument("causal_slices: one covariate row per pair expected");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < dataset.pairs.size(); ++i)
    if (dataset.pairs[i].causal) groups[dataset.pairs[i].causal->slice].push_back(i);
  std::vector<CausalSlice> out;
  for (const auto& [slice, rows] : groups) {
    CausalSlice s;
    s.outcomes.resize(static_cast<Eigen::Index>(rows.size()));
    s.covariates.resize(static_cast<Eigen::Index>(rows.size()), covariates.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& lab = *dataset.pairs[rows[r]].causal;
      s.outcomes[static_cast<Eigen::Index>(r)] = lab.outcome;
      s.treatments.push_back(lab.treatment);
      s.covariates.row(static_cast<Eigen::Index>(r)) = covariates.row(static_cast<Eigen::Index>(rows[r]));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dynident
