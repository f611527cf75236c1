#pragma once

// Downstream evaluation of learned latents: per-block classification,
// nonlinear R^2 against ground-truth parameters, and AIPW treatment effects.

#include "dynident/multiview.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dynident {

struct LogisticOptions {
  double l2 = 1e-4;
  int max_iter = 3000;
  double grad_tol = 1e-7;
};

// Multinomial logistic regression on standardized features.
struct LogisticModel {
  std::vector<int> classes;  // sorted distinct labels
  Mat weights;               // p x K
  Vec bias;                  // K
  Vec mean;                  // feature standardization
  Vec scale;
  int iterations = 0;
};

// Full-batch gradient descent with Armijo backtracking. Throws DegenerateLabels
// with fewer than two classes.
LogisticModel logistic_fit(const Mat& features, const std::vector<int>& labels,
                           const LogisticOptions& options = {});
Mat logistic_proba(const LogisticModel& model, const Mat& features);  // n x K
std::vector<int> logistic_predict(const LogisticModel& model, const Mat& features);
double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

// 1 where value > median of the column, else 0.
std::vector<int> median_split(const Vec& values);

// Seeded permutation split: first `test` indices of the permutation are held out.
struct Split {
  std::vector<Eigen::Index> train;
  std::vector<Eigen::Index> test;
};
Split train_test_split(Eigen::Index n, double test_fraction, std::uint64_t seed);

struct PartitionAccuracyMatrix {
  Mat accuracy;  // blocks x factors
  std::vector<std::string> warnings;
};

// factor_labels[f][i]: label of factor f for row i.
PartitionAccuracyMatrix partition_accuracy(const Mat& latents, const PartitionLayout& layout,
                                           const std::vector<std::vector<int>>& factor_labels,
                                           std::uint64_t seed, double test_fraction = 0.2);

struct R2Result {
  std::vector<double> per_component;
  double mean = 0.0;
};

struct KernelRidgeOptions {
  double ridge = 1e-3;
  double test_fraction = 0.2;
  double whitening_floor = 1e-8;  // relative eigenvalue floor
  std::size_t bandwidth_sample = 1000;
};

// Held-out R^2 of predicting each target column from `block`. The model is a
// linear fit plus an RBF kernel ridge on its residual, on whitened inputs.
R2Result latent_r2(const Mat& block, const Mat& targets, std::uint64_t seed,
                   const KernelRidgeOptions& options = {});

struct AteResult {
  double ate_hat = 0.0;
  double se_hat = 0.0;
  int n = 0;
  double clipped_fraction = 0.0;
  std::vector<std::string> warnings;
};

struct AipwOptions {
  double clip_lo = 0.01;
  double clip_hi = 0.99;
  double positivity_warning = 0.2;
  double outcome_ridge = 1e-6;
  LogisticOptions propensity;
};

AteResult aipw_ate(const Vec& outcomes, const std::vector<int>& treatments, const Mat& covariates,
                   const AipwOptions& options = {});
// Separate covariates for the propensity and the outcome models.
AteResult aipw_ate(const Vec& outcomes, const std::vector<int>& treatments, const Mat& propensity_covariates,
                   const Mat& outcome_covariates, const AipwOptions& options = {});

struct CausalSlice {
  Vec outcomes;
  std::vector<int> treatments;
  Mat covariates;
};

struct AteTrend {
  std::vector<AteResult> per_slice;
  std::vector<double> change_ratios;  // (ATE_k - ATE_0) / ATE_0
};

AteTrend ate_trend(const std::vector<CausalSlice>& slices, const AipwOptions& options = {});

// Pool-adjacent-violators least-squares nondecreasing fit.
std::vector<double> isotonic_fit(const std::vector<double>& values);

// Synthetic causal labels on a multiview dataset: the confounders are the
// first view's shared parameters rescaled to [-1, 1]; the effect in slice k is
// base_ate * (1 + growth * k).
struct CausalDesign {
  int n_slices = 5;
  double base_ate = 1.0;
  double growth = 0.1;
  double noise = 0.1;
};

void attach_causal_labels(MultiviewDataset& dataset, const OdeSystem& system, const CausalDesign& design,
                          std::uint64_t seed);
double design_ate(const CausalDesign& design, int slice);

// Groups labelled pairs by slice, using each pair's first-view latent block as covariates.
std::vector<CausalSlice> causal_slices(const MultiviewDataset& dataset, const Mat& covariates);

}  // namespace dynident
