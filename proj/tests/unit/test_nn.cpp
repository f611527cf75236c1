#include "doctest.h"

#include "dynident/errors.hpp"
#include "dynident/nn.hpp"

#include <cmath>

using namespace dynident;
using namespace dynident::nn;

namespace {

Mat random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

// Straight-line reference forward pass, independent of the Tensor graph.
Mat reference_forward(const MlpParams& p, const Mat& x) {
  Mat h = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const Mat& w = p.layers[l].weight.value();
    const Mat& b = p.layers[l].bias.value();
    Mat next(h.rows(), w.cols());
    for (Eigen::Index r = 0; r < h.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        double acc = b(0, c);
        for (Eigen::Index k = 0; k < h.cols(); ++k) acc += h(r, k) * w(k, c);
        if (l + 1 < p.layers.size())
          acc = p.activation == Activation::tanh ? std::tanh(acc) : std::max(acc, 0.0);
        next(r, c) = acc;
      }
    h = next;
  }
  return h;
}

}  // namespace

TEST_CASE("mlp_forward") {
  Rng rng = make_rng(1);
  SUBCASE("identity single layer") {
    MlpParams p = make_mlp(3, 3, 0, 1, Activation::tanh, rng);
    p.layers[0].weight.data() = Mat::Identity(3, 3);
    const Mat x = random_matrix(rng, 4, 3);
    CHECK(mlp_forward(p, Tensor::constant(x)).value() == x);
  }
  SUBCASE("zero weights return the bias") {
    MlpParams p = make_mlp(2, 3, 5, 2, Activation::relu, rng);
    for (auto& l : p.layers) l.weight.data().setZero();
    p.layers[1].bias.data() << 0.5, -1.0, 2.0;
    const Mat out = mlp_forward(p, Tensor::constant(random_matrix(rng, 6, 2))).value();
    for (Eigen::Index r = 0; r < out.rows(); ++r) CHECK(out.row(r) == p.layers[1].bias.value().row(0));
  }
  SUBCASE("matches a straight-line implementation") {
    for (auto act : {Activation::tanh, Activation::relu}) {
      MlpParams p = make_mlp(4, 3, 7, 2, act, rng);
      for (auto& l : p.layers) l.bias.data() = random_matrix(rng, 1, l.bias.cols());
      const Mat x = random_matrix(rng, 5, 4);
      CHECK((mlp_forward(p, Tensor::constant(x)).value() - reference_forward(p, x)).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
  SUBCASE("shape mismatch") {
    MlpParams p = make_mlp(4, 3, 7, 2, Activation::tanh, rng);
    CHECK_THROWS_AS(mlp_forward(p, Tensor::constant(Mat::Zero(2, 5))), InvalidArgument);
  }
  SUBCASE("Glorot bounds") {
    MlpParams p = make_mlp(10, 6, 30, 3, Activation::tanh, rng);
    CHECK(p.layers[0].weight.value().cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 40.0));
    CHECK(p.layers[1].weight.value().cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 60.0));
    CHECK(p.layers[2].bias.value().isZero());
  }
}

TEST_CASE("backward") {
  SUBCASE("sum of squares") {
    Mat w0(1, 2);
    w0 << 1.0, 2.0;
    Tensor w = Tensor::parameter(w0);
    Tensor unused = Tensor::parameter(Mat::Ones(2, 2));
    unused.zero_grad();
    backward(sum_squares(w));
    CHECK(w.grad()(0, 0) == 2.0);
    CHECK(w.grad()(0, 1) == 4.0);
    CHECK(unused.grad().isZero());
    backward(sum_squares(w));
    CHECK(w.grad()(0, 1) == 8.0);  // accumulates until zeroed
    w.zero_grad();
    CHECK(w.grad().isZero());
  }
  SUBCASE("non-scalar loss") {
    Tensor w = Tensor::parameter(Mat::Ones(2, 2));
    CHECK_THROWS_AS(backward(tanh(w)), InvalidArgument);
  }
  SUBCASE("relu subgradient at zero is zero") {
    Tensor w = Tensor::parameter(Mat::Zero(1, 3));
    backward(sum(relu(w)));
    CHECK(w.grad().isZero());
  }
  SUBCASE("MLP mean squared error against central differences") {
    Rng rng = make_rng(5);
    for (auto act : {Activation::tanh, Activation::relu}) {
      MlpParams p = make_mlp(3, 2, 6, 3, act, rng);
      for (auto& l : p.layers) l.bias.data() = 0.1 * random_matrix(rng, 1, l.bias.cols());
      const Tensor x = Tensor::constant(random_matrix(rng, 8, 3));
      const Tensor y = Tensor::constant(random_matrix(rng, 8, 2));
      auto loss = [&] { return mean(mul(mlp_forward(p, x) - y, mlp_forward(p, x) - y)); };
      auto params = p.parameters();
      for (auto& t : params) t.zero_grad();
      backward(loss());
      double worst = 0.0;
      const double h = 1e-5;
      for (auto& t : params) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
          double& xi = t.data().data()[i];
          const double s = xi;
          xi = s + h;
          const double fp = loss().item();
          xi = s - h;
          const double fm = loss().item();
          xi = s;
          const double num = (fp - fm) / (2 * h);
          const double an = t.grad().data()[i];
          worst = std::max(worst, std::abs(an - num) / std::max({std::abs(an), std::abs(num), 1e-6}));
        }
      }
      CHECK(worst <= 1e-4);
    }
  }
  SUBCASE("gather, slice and concat route gradients") {
    Rng rng = make_rng(8);
    Tensor a = Tensor::parameter(random_matrix(rng, 3, 4));
    Tensor b = Tensor::parameter(random_matrix(rng, 3, 2));
    auto loss = [&] {
      return sum_squares(concat_cols({cols(a, {3, 0}), slice_cols(a, 1, 2), scale(b, 2.0)}));
    };
    CHECK(gradient_check(loss, {a, b}) <= 1e-7);
  }
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    AdamState st;
    std::vector<Mat> p{Mat::Constant(2, 2, 3.0)};
    const std::vector<Mat> g{Mat::Zero(2, 2)};
    adam_step(st, p, g);
    adam_step(st, p, g);
    CHECK(p[0] == Mat::Constant(2, 2, 3.0));
    CHECK(st.step == 2);
  }
  SUBCASE("first bias-corrected step moves by lr") {
    AdamState st;
    st.lr = 0.1;
    std::vector<Mat> p{Mat::Constant(1, 1, 1.0)};
    adam_step(st, p, std::vector<Mat>{Mat::Constant(1, 1, 1.0)});
    // m_hat = 1, v_hat = 1 -> update = 0.1 / (1 + 1e-8)
    CHECK(p[0](0, 0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  }
  SUBCASE("identical groups evolve identically") {
    AdamState st;
    std::vector<Mat> p{Mat::Constant(2, 1, 0.5), Mat::Constant(2, 1, 0.5)};
    for (int i = 0; i < 5; ++i) {
      const Mat g = Mat::Constant(2, 1, 0.3 * (i + 1));
      adam_step(st, p, std::vector<Mat>{g, g});
    }
    CHECK(p[0] == p[1]);
  }
  SUBCASE("zero learning rate freezes parameters") {
    AdamState st;
    st.lr = 0.0;
    std::vector<Mat> p{Mat::Constant(3, 1, -2.0)};
    for (int i = 0; i < 3; ++i) adam_step(st, p, std::vector<Mat>{Mat::Constant(3, 1, 7.0 * i - 1)});
    CHECK(p[0] == Mat::Constant(3, 1, -2.0));
  }
  SUBCASE("tensor overload reads gradients from the graph") {
    Tensor w = Tensor::parameter(Mat::Constant(1, 1, 2.0));
    AdamState st;
    st.lr = 0.5;
    backward(sum_squares(w));
    adam_step(st, std::vector<Tensor>{w});
    CHECK(w.value()(0, 0) < 2.0);
  }
}

TEST_CASE("gradient_check") {
  Rng rng = make_rng(13);
  SUBCASE("quadratic") {
    Tensor w = Tensor::parameter(random_matrix(rng, 4, 3));
    GradientCheckOptions opt;
    opt.h = 1e-3;  // central differences are exact on quadratics; a larger step cuts roundoff
    CHECK(gradient_check([&] { return sum_squares(w); }, {w}, opt) <= 1e-9);
  }
  SUBCASE("subsampling and restoration") {
    MlpParams p = make_mlp(5, 4, 32, 3, Activation::relu, rng);
    const Tensor x = Tensor::constant(random_matrix(rng, 10, 5));
    const Mat before = p.layers[0].weight.value();
    GradientCheckOptions opt;
    opt.max_coordinates = 50;
    CHECK(gradient_check([&] { return mean(mul(mlp_forward(p, x), mlp_forward(p, x))); }, p.parameters(), opt) <= 1e-4);
    CHECK(p.layers[0].weight.value() == before);
  }
  SUBCASE("detects a wrong gradient") {
    Tensor w = Tensor::parameter(random_matrix(rng, 2, 2));
    // value of w^2 summed, but backward sees only a linear term: a mismatch
    auto broken = [&] {
      Tensor lin = sum(w);
      Tensor fake = Tensor::constant(Mat::Constant(1, 1, w.value().squaredNorm() - w.value().sum()));
      return add(lin, fake);
    };
    CHECK(gradient_check(broken, {w}) > 1e-2);
  }
}

TEST_CASE("MLP checkpoint round trip") {
  Rng rng = make_rng(21);
  MlpParams p = make_mlp(3, 2, 5, 3, Activation::relu, rng);
  const auto j = mlp_to_json(p);
  const MlpParams back = mlp_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.activation == p.activation);
  REQUIRE(back.layers.size() == p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(back.layers[l].weight.value() == p.layers[l].weight.value());
    CHECK(back.layers[l].bias.value() == p.layers[l].bias.value());
  }
  auto bad = j;
  bad["format"] = "other";
  CHECK_THROWS_AS(mlp_from_json(bad), InvalidArgument);
  bad = j;
  bad["layers"][1]["weight"]["shape"] = {4, 5};
  CHECK_THROWS_AS(mlp_from_json(bad), InvalidArgument);
}
