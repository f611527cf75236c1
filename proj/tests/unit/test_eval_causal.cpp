#include "doctest.h"

#include "dynident/errors.hpp"
#include "dynident/eval_causal.hpp"

#include <cmath>

using namespace dynident;

namespace {

Mat normal_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

Mat uniform_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1.0, 1.0);
  return m;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Confounded {
  Vec y;
  std::vector<int> t;
  Mat x;
};

// X ~ N(0,1), e(X) = sigmoid(X), Y = ate T + X + eps
Confounded confounded(Rng& rng, Eigen::Index n, double ate, double noise = 0.1) {
  Confounded d{Vec(n), {}, Mat(n, 1)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = standard_normal(rng);
    const int t = uniform(rng, 0.0, 1.0) < sigmoid(x) ? 1 : 0;
    d.x(i, 0) = x;
    d.t.push_back(t);
    d.y[i] = ate * t + x + noise * standard_normal(rng);
  }
  return d;
}

}  // namespace

TEST_CASE("logistic_fit") {
  Rng rng = make_rng(3);
  SUBCASE("separable two-class data") {
    Mat x(40, 2);
    std::vector<int> y;
    for (int i = 0; i < 40; ++i) {
      const int c = i % 2;
      x(i, 0) = (c ? 2.0 : -2.0) + 0.3 * standard_normal(rng);
      x(i, 1) = standard_normal(rng);
      y.push_back(c);
    }
    const auto m = logistic_fit(x, y);
    CHECK(accuracy(logistic_predict(m, x), y) == 1.0);
  }
  SUBCASE("three classes keep their label values") {
    Mat x(90, 1);
    std::vector<int> y;
    for (int i = 0; i < 90; ++i) {
      const int c = (i % 3) * 5;
      x(i, 0) = c + 0.2 * standard_normal(rng);
      y.push_back(c);
    }
    const auto m = logistic_fit(x, y);
    CHECK(m.classes == std::vector<int>{0, 5, 10});
    CHECK(accuracy(logistic_predict(m, x), y) >= 0.98);
  }
  SUBCASE("permuted labels give chance held-out accuracy") {
    const Mat x = normal_matrix(rng, 2000, 3);
    std::vector<int> y;
    for (int i = 0; i < 2000; ++i) y.push_back(static_cast<int>(rng() % 4));
    const auto split = train_test_split(2000, 0.2, 1);
    Mat xtr(static_cast<Eigen::Index>(split.train.size()), 3), xte(static_cast<Eigen::Index>(split.test.size()), 3);
    std::vector<int> ytr, yte;
    for (std::size_t i = 0; i < split.train.size(); ++i) {
      xtr.row(static_cast<Eigen::Index>(i)) = x.row(split.train[i]);
      ytr.push_back(y[static_cast<std::size_t>(split.train[i])]);
    }
    for (std::size_t i = 0; i < split.test.size(); ++i) {
      xte.row(static_cast<Eigen::Index>(i)) = x.row(split.test[i]);
      yte.push_back(y[static_cast<std::size_t>(split.test[i])]);
    }
    const double acc = accuracy(logistic_predict(logistic_fit(xtr, ytr), xte), yte);
    CHECK(std::abs(acc - 0.25) <= 0.1);
  }
  SUBCASE("duplicating every row leaves the fit unchanged") {
    const Mat x = normal_matrix(rng, 100, 2);
    std::vector<int> y;
    for (int i = 0; i < 100; ++i) y.push_back(x(i, 0) + 0.5 * standard_normal(rng) > 0 ? 1 : 0);
    Mat x2(200, 2);
    x2 << x, x;
    std::vector<int> y2 = y;
    y2.insert(y2.end(), y.begin(), y.end());
    const auto a = logistic_fit(x, y), b = logistic_fit(x2, y2);
    CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((a.bias - b.bias).cwiseAbs().maxCoeff() <= 1e-9);
  }
  SUBCASE("single class") {
    CHECK_THROWS_AS(logistic_fit(Mat::Ones(5, 1), std::vector<int>(5, 1)), DegenerateLabels);
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(logistic_fit(Mat::Ones(5, 1), std::vector<int>{0, 1}), InvalidArgument);
  }
}

TEST_CASE("partition_accuracy") {
  Rng rng = make_rng(5);
  const auto layout = PartitionLayout::contiguous(6, 3);
  const Eigen::Index n = 1000;
  SUBCASE("information only in the first block") {
    Mat z = normal_matrix(rng, n, 6);
    const Vec factor = z.col(0) + 0.5 * z.col(1);
    const auto labels = median_split(factor);
    const auto pa = partition_accuracy(z, layout, {labels}, 1);
    CHECK(pa.accuracy(0, 0) >= 0.95);
    CHECK(std::abs(pa.accuracy(1, 0) - 0.5) <= 0.1);
    CHECK(std::abs(pa.accuracy(2, 0) - 0.5) <= 0.1);
    CHECK(pa.warnings.empty());
  }
  SUBCASE("shuffled labels are at chance in every block") {
    const Mat z = normal_matrix(rng, n, 6);
    std::vector<int> labels;
    for (Eigen::Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng() % 2));
    const auto pa = partition_accuracy(z, layout, {labels}, 2);
    for (Eigen::Index b = 0; b < 3; ++b) CHECK(std::abs(pa.accuracy(b, 0) - 0.5) <= 0.1);
  }
  SUBCASE("constant labels give 1 with a warning") {
    const auto pa = partition_accuracy(normal_matrix(rng, 50, 6), layout, {std::vector<int>(50, 3)}, 3);
    CHECK(pa.accuracy(0, 0) == 1.0);
    CHECK(pa.warnings.size() == 1);
  }
  SUBCASE("entries lie in [0, 1]") {
    const Mat z = normal_matrix(rng, 200, 6);
    const auto pa = partition_accuracy(z, layout, {median_split(z.col(2)), median_split(z.col(5))}, 4);
    CHECK(pa.accuracy.minCoeff() >= 0.0);
    CHECK(pa.accuracy.maxCoeff() <= 1.0);
  }
}

TEST_CASE("latent_r2") {
  Rng rng = make_rng(7);
  const Mat theta = uniform_matrix(rng, 1000, 2);
  SUBCASE("identity") {
    const auto r = latent_r2(theta, theta, 1);
    CHECK(r.per_component[0] >= 1.0 - 1e-6);
    CHECK(r.per_component[1] >= 1.0 - 1e-6);
  }
  SUBCASE("noise") {
    const auto r = latent_r2(normal_matrix(rng, 1000, 4), theta, 1);
    CHECK(r.mean <= 0.1);
  }
  SUBCASE("monotone transform") {
    const Mat z = theta.array().tanh().matrix();
    CHECK(latent_r2(z, theta, 1).mean >= 0.95);
  }
  SUBCASE("nonlinear invertible map") {
    Mat z(1000, 2);
    z.col(0) = (2.0 * theta.col(0)).array().exp().matrix() + theta.col(1);
    z.col(1) = theta.col(1).array().cube().matrix() + theta.col(1);
    CHECK(latent_r2(z, theta, 1).mean >= 0.95);
  }
  SUBCASE("invariant to an invertible linear map") {
    Mat z(1000, 3);
    z << theta.col(0).array().sin().matrix(), theta.col(1).array().square().matrix(), normal_matrix(rng, 1000, 1);
    Mat a(3, 3);
    a << 2.0, 0.5, -1.0, 0.1, 3.0, 0.2, -0.4, 0.0, 0.7;
    const auto r1 = latent_r2(z, theta, 11), r2 = latent_r2(z * a, theta, 11);
    for (int c = 0; c < 2; ++c) CHECK(std::abs(r1.per_component[c] - r2.per_component[c]) <= 0.02);
  }
  SUBCASE("row mismatch") { CHECK_THROWS_AS(latent_r2(theta.topRows(10), theta, 1), InvalidArgument); }
}

TEST_CASE("aipw_ate") {
  Rng rng = make_rng(11);
  SUBCASE("randomized treatment") {
    const Eigen::Index n = 10000;
    Vec y(n);
    std::vector<int> t;
    Mat x = normal_matrix(rng, n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      t.push_back(uniform(rng, 0.0, 1.0) < 0.5 ? 1 : 0);
      y[i] = 2.0 * t.back() + 0.1 * standard_normal(rng);
    }
    const auto r = aipw_ate(y, t, x);
    CHECK(std::abs(r.ate_hat - 2.0) <= 0.05);
    CHECK(r.se_hat >= 0.0);
    CHECK(r.n == n);
    CHECK(r.warnings.empty());
  }
  SUBCASE("null effect") {
    const auto d = confounded(rng, 5000, 0.0);
    const auto r = aipw_ate(d.y, d.t, d.x);
    CHECK(std::abs(r.ate_hat) <= 3.0 * r.se_hat);
  }
  SUBCASE("confounded with analytic effect") {
    const auto d = confounded(rng, 10000, 1.5);
    // the naive difference in means is biased upwards here
    double m1 = 0, m0 = 0;
    int n1 = 0;
    for (std::size_t i = 0; i < d.t.size(); ++i) {
      if (d.t[i]) m1 += d.y[static_cast<Eigen::Index>(i)], ++n1;
      else m0 += d.y[static_cast<Eigen::Index>(i)];
    }
    const double naive = m1 / n1 - m0 / (static_cast<double>(d.t.size()) - n1);
    CHECK(naive - 1.5 > 0.3);
    CHECK(std::abs(aipw_ate(d.y, d.t, d.x).ate_hat - 1.5) <= 0.1);
  }
  SUBCASE("double robustness") {
    const auto d = confounded(rng, 10000, 1.5);
    const Mat sq = d.x.array().square().matrix();
    CHECK(std::abs(aipw_ate(d.y, d.t, sq, d.x).ate_hat - 1.5) <= 0.15);  // wrong propensity
    CHECK(std::abs(aipw_ate(d.y, d.t, d.x, sq).ate_hat - 1.5) <= 0.15);  // wrong outcome model
  }
  SUBCASE("positivity warning") {
    const Eigen::Index n = 400;
    Mat x(n, 1);
    std::vector<int> t;
    Vec y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      x(i, 0) = 10.0 * standard_normal(rng);
      t.push_back(uniform(rng, 0.0, 1.0) < sigmoid(x(i, 0)) ? 1 : 0);
      y[i] = t.back() + standard_normal(rng);
    }
    const auto r = aipw_ate(y, t, x);
    CHECK(r.clipped_fraction > 0.2);
    CHECK(r.warnings.size() == 1);
  }
  SUBCASE("one arm") {
    CHECK_THROWS_AS(aipw_ate(Vec::Ones(100), std::vector<int>(100, 1), Mat::Ones(100, 1)), InvalidArgument);
  }
  SUBCASE("too few units") {
    std::vector<int> t(20, 0);
    t[0] = 1;
    CHECK_THROWS_AS(aipw_ate(Vec::Ones(20), t, Mat::Ones(20, 1)), InvalidArgument);
  }
}

TEST_CASE("ate_trend") {
  Rng rng = make_rng(13);
  SUBCASE("identical slices") {
    const auto d = confounded(rng, 2000, 1.0);
    const CausalSlice s{d.y, d.t, d.x};
    const auto tr = ate_trend({s, s, s});
    for (double r : tr.change_ratios) CHECK(r == 0.0);
  }
  SUBCASE("linear drift of 10% per slice") {
    std::vector<CausalSlice> slices;
    for (int k = 0; k < 6; ++k) {
      const auto d = confounded(rng, 3000, 1.0 + 0.1 * k);
      slices.push_back({d.y, d.t, d.x});
    }
    const auto tr = ate_trend(slices);
    const auto smooth = isotonic_fit(tr.change_ratios);
    CHECK(smooth.front() == 0.0);
    CHECK(smooth.back() > 0.3);
    for (std::size_t k = 1; k < smooth.size(); ++k) CHECK(smooth[k] >= smooth[k - 1]);
    // the raw estimates already track the constructed ratios
    for (std::size_t k = 0; k < tr.change_ratios.size(); ++k)
      CHECK(std::abs(tr.change_ratios[k] - 0.1 * static_cast<double>(k)) <= 0.1);
  }
  SUBCASE("single slice") {
    const auto d = confounded(rng, 100, 1.0);
    CHECK_THROWS_AS(ate_trend({CausalSlice{d.y, d.t, d.x}}), InvalidArgument);
  }
}

TEST_CASE("isotonic_fit") {
  CHECK(isotonic_fit({1.0, 3.0, 2.0, 4.0}) == std::vector<double>{1.0, 2.5, 2.5, 4.0});
  CHECK(isotonic_fit({3.0, 2.0, 1.0}) == std::vector<double>{2.0, 2.0, 2.0});
  CHECK(isotonic_fit({}).empty());
}

TEST_CASE("causal labels on a multiview dataset") {
  const auto& sys = find_system("ode27");
  auto ds = generate_multiview_dataset(sys, {0, 1}, 60, 3);
  CausalDesign design;
  design.n_slices = 3;
  attach_causal_labels(ds, sys, design, 9);
  int treated = 0;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    REQUIRE(ds.pairs[i].causal);
    CHECK(ds.pairs[i].causal->slice == static_cast<int>(i % 3));
    treated += ds.pairs[i].causal->treatment;
  }
  CHECK(treated > 0);
  CHECK(treated < 60);
  CHECK(design_ate(design, 2) == doctest::Approx(1.2));
  const auto slices = causal_slices(ds, Mat::Zero(60, 2));
  CHECK(slices.size() == 3);
  CHECK(slices[1].outcomes.size() == 20);
}
