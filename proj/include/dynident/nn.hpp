#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D tensors,
// MLP layers and Adam. Tensors are row-major in meaning: rows index the batch.

#include "dynident/rng.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace dynident::nn {

using Mat = Eigen::MatrixXd;

namespace detail {
struct Node;
}

// Shared handle to a graph node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Mat value);
  static Tensor parameter(Mat value);  // leaf with requires_grad

  bool defined() const { return static_cast<bool>(node_); }
  const Mat& value() const;
  // Leaf storage; mutating a non-leaf invalidates its recorded graph.
  Mat& data() const;
  const Mat& grad() const;  // empty until a backward pass reaches this tensor
  void zero_grad() const;
  bool requires_grad() const;

  std::array<Eigen::Index, 2> shape() const { return {rows(), cols()}; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Eigen::Index size() const { return value().size(); }
  double item() const;  // 1x1 tensors only

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise / linear-algebra ops. Shapes must match exactly except where
// noted; mismatches throw InvalidArgument.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_row(const Tensor& a, const Tensor& row);  // row is 1 x cols, broadcast over rows
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);  // derivative at exactly 0 is taken as 0
Tensor sum(const Tensor& a);   // -> 1x1
Tensor mean(const Tensor& a);  // -> 1x1
Tensor sum_squares(const Tensor& a);
Tensor cols(const Tensor& a, const std::vector<int>& indices);  // gather columns
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor concat_cols(const std::vector<Tensor>& parts);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// Reverse-mode pass from a scalar. Leaf gradients accumulate across calls
// until zero_grad; interior gradients are recomputed each call.
void backward(const Tensor& loss);

enum class Activation { relu, tanh };
std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct Layer {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

struct MlpParams {
  std::vector<Layer> layers;
  Activation activation = Activation::tanh;
  int in_dim = 0;
  int out_dim = 0;
  int hidden_dim = 0;
  int depth = 0;  // number of affine layers

  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  MlpParams clone() const;  // deep copy with fresh leaves
};

// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
MlpParams make_mlp(int in_dim, int out_dim, int hidden_dim, int depth, Activation activation,
                   Rng& rng);

// Affine + activation for every layer but the last, which stays affine.
Tensor mlp_forward(const MlpParams& params, const Tensor& input);

struct AdamState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam update in place; moments are allocated on first use.
void adam_step(AdamState& state, std::span<Mat> params, std::span<const Mat> grads);
void adam_step(AdamState& state, const std::vector<Tensor>& params);

struct GradientCheckOptions {
  double h = 1e-5;
  std::size_t max_coordinates = 200;
  std::uint64_t seed = 0;
  // Parameters are shifted by up to this much before checking so no relu
  // input sits exactly on its kink; the originals are restored afterwards.
  double jitter = 1e-12;
  double denominator_floor = 1e-6;
};

// Max over a random subsample of coordinates of
// |analytic - central difference| / max(|analytic|, |numeric|, floor).
double gradient_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                      const GradientCheckOptions& options = {});

inline constexpr const char* kMlpFormat = "dynident-mlp/1";
nlohmann::json mlp_to_json(const MlpParams& params);
MlpParams mlp_from_json(const nlohmann::json& j);

}  // namespace dynident::nn
