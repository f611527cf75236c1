#include "dynident/nn.hpp"

#include "dynident/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace dynident::nn {

namespace detail {

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Adds this node's gradient contribution into its parents.
  std::function<void(Node&)> backward_fn;

  Mat& ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = Mat::Zero(value.rows(), value.cols());
    return grad;
  }
};

}  // namespace detail

using detail::Node;

namespace {

const Mat& empty_matrix() {
  static const Mat empty;
  return empty;
}

Tensor make_result(Mat value, std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->leaf = false;
  node->requires_grad = std::any_of(parents.begin(), parents.end(),
                                    [](const auto& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(node);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidArgument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
}

void require_defined(const Tensor& a, const char* op) {
  if (!a.defined()) throw InvalidArgument(std::string(op) + ": undefined tensor");
}

}  // namespace

Tensor Tensor::constant(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Tensor(node);
}

Tensor Tensor::parameter(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Tensor(node);
}

const Mat& Tensor::value() const {
  if (!node_) throw InvalidArgument("undefined tensor");
  return node_->value;
}

Mat& Tensor::data() const {
  if (!node_) throw InvalidArgument("undefined tensor");
  return node_->value;
}

const Mat& Tensor::grad() const { return node_ ? node_->grad : empty_matrix(); }

void Tensor::zero_grad() const {
  if (node_) node_->grad = Mat::Zero(node_->value.rows(), node_->value.cols());
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw InvalidArgument("item() needs a 1x1 tensor");
  return value()(0, 0);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows())
    throw InvalidArgument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()) + ")");
  auto pa = a.node(), pb = b.node();
  return make_result(a.value() * b.value(), {pa, pb}, [pa, pb](Node& out) {
    if (pa->requires_grad) pa->ensure_grad().noalias() += out.grad * pb->value.transpose();
    if (pb->requires_grad) pb->ensure_grad().noalias() += pa->value.transpose() * out.grad;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  return make_result(a.value() + b.value(), {pa, pb}, [pa, pb](Node& out) {
    if (pa->requires_grad) pa->ensure_grad() += out.grad;
    if (pb->requires_grad) pb->ensure_grad() += out.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  return make_result(a.value() - b.value(), {pa, pb}, [pa, pb](Node& out) {
    if (pa->requires_grad) pa->ensure_grad() += out.grad;
    if (pb->requires_grad) pb->ensure_grad() -= out.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  return make_result(a.value().cwiseProduct(b.value()), {pa, pb}, [pa, pb](Node& out) {
    if (pa->requires_grad) pa->ensure_grad() += out.grad.cwiseProduct(pb->value);
    if (pb->requires_grad) pb->ensure_grad() += out.grad.cwiseProduct(pa->value);
  });
}

Tensor scale(const Tensor& a, double s) {
  require_defined(a, "scale");
  auto pa = a.node();
  return make_result(a.value() * s, {pa}, [pa, s](Node& out) { pa->ensure_grad() += s * out.grad; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_defined(a, "add_row");
  require_defined(row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols())
    throw InvalidArgument("add_row: expected a 1x" + std::to_string(a.cols()) + " row");
  auto pa = a.node(), pr = row.node();
  Mat v = a.value();
  v.rowwise() += row.value().row(0);
  return make_result(std::move(v), {pa, pr}, [pa, pr](Node& out) {
    if (pa->requires_grad) pa->ensure_grad() += out.grad;
    if (pr->requires_grad) pr->ensure_grad() += out.grad.colwise().sum();
  });
}

Tensor tanh(const Tensor& a) {
  require_defined(a, "tanh");
  auto pa = a.node();
  Mat v = a.value().array().tanh().matrix();
  return make_result(v, {pa}, [pa](Node& out) {
    pa->ensure_grad().array() += out.grad.array() * (1.0 - out.value.array().square());
  });
}

Tensor relu(const Tensor& a) {
  require_defined(a, "relu");
  auto pa = a.node();
  return make_result(a.value().cwiseMax(0.0), {pa}, [pa](Node& out) {
    pa->ensure_grad().array() += (pa->value.array() > 0.0).select(out.grad.array(), 0.0);
  });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  auto pa = a.node();
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return make_result(std::move(v), {pa}, [pa](Node& out) { pa->ensure_grad().array() += out.grad(0, 0); });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.size() == 0) throw InvalidArgument("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_squares(const Tensor& a) {
  require_defined(a, "sum_squares");
  auto pa = a.node();
  Mat v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return make_result(std::move(v), {pa}, [pa](Node& out) {
    pa->ensure_grad() += (2.0 * out.grad(0, 0)) * pa->value;
  });
}

Tensor cols(const Tensor& a, const std::vector<int>& indices) {
  require_defined(a, "cols");
  Mat v(a.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int c = indices[k];
    if (c < 0 || c >= a.cols()) throw InvalidArgument("cols: column index out of range");
    v.col(static_cast<Eigen::Index>(k)) = a.value().col(c);
  }
  auto pa = a.node();
  return make_result(std::move(v), {pa}, [pa, indices](Node& out) {
    Mat& g = pa->ensure_grad();
    for (std::size_t k = 0; k < indices.size(); ++k)
      g.col(indices[k]) += out.grad.col(static_cast<Eigen::Index>(k));
  });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  require_defined(a, "slice_cols");
  if (start < 0 || count < 0 || start + count > a.cols())
    throw InvalidArgument("slice_cols: range out of bounds");
  auto pa = a.node();
  return make_result(a.value().middleCols(start, count), {pa}, [pa, start, count](Node& out) {
    pa->ensure_grad().middleCols(start, count) += out.grad;
  });
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  require_defined(a, "slice_rows");
  if (start < 0 || count < 0 || start + count > a.rows())
    throw InvalidArgument("slice_rows: range out of bounds");
  auto pa = a.node();
  return make_result(a.value().middleRows(start, count), {pa}, [pa, start, count](Node& out) {
    pa->ensure_grad().middleRows(start, count) += out.grad;
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: nothing to concatenate");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_cols");
    if (p.rows() != rows) throw InvalidArgument("concat_cols: row counts differ");
    total += p.cols();
  }
  Mat v(rows, total);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    parents.push_back(p.node());
    offsets.push_back(off);
    off += p.cols();
  }
  auto captured = parents;
  return make_result(std::move(v), std::move(parents), [captured, offsets](Node& out) {
    for (std::size_t k = 0; k < captured.size(); ++k) {
      auto& p = captured[k];
      if (p->requires_grad) p->ensure_grad() += out.grad.middleCols(offsets[k], p->value.cols());
    }
  });
}

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.rows() != 1 || loss.cols() != 1)
    throw InvalidArgument("backward: loss must be a scalar (1x1) tensor");
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS -> topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->leaf) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  root->ensure_grad()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf && n->backward_fn) n->backward_fn(*n);
  }
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw InvalidArgument("unknown activation '" + name + "'");
}

std::vector<Tensor> MlpParams::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

MlpParams MlpParams::clone() const {
  MlpParams copy = *this;
  for (auto& l : copy.layers) {
    l.weight = Tensor::parameter(l.weight.value());
    l.bias = Tensor::parameter(l.bias.value());
  }
  return copy;
}

MlpParams make_mlp(int in_dim, int out_dim, int hidden_dim, int depth, Activation activation,
                   Rng& rng) {
  if (in_dim < 1 || out_dim < 1 || depth < 1 || (depth > 1 && hidden_dim < 1))
    throw InvalidArgument("make_mlp: dimensions and depth must be positive");
  MlpParams p;
  p.activation = activation;
  p.in_dim = in_dim;
  p.out_dim = out_dim;
  p.hidden_dim = hidden_dim;
  p.depth = depth;
  for (int l = 0; l < depth; ++l) {
    const int fan_in = l == 0 ? in_dim : hidden_dim;
    const int fan_out = l == depth - 1 ? out_dim : hidden_dim;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Mat w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -limit, limit);
    p.layers.push_back({Tensor::parameter(std::move(w)), Tensor::parameter(Mat::Zero(1, fan_out))});
  }
  return p;
}

Tensor mlp_forward(const MlpParams& params, const Tensor& input) {
  if (input.cols() != params.in_dim)
    throw InvalidArgument("mlp_forward: input has " + std::to_string(input.cols()) +
                          " features, network expects " + std::to_string(params.in_dim));
  Tensor h = input;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    h = add_row(matmul(h, params.layers[l].weight), params.layers[l].bias);
    if (l + 1 < params.layers.size())
      h = params.activation == Activation::relu ? relu(h) : tanh(h);
  }
  return h;
}

void adam_step(AdamState& state, std::span<Mat> params, std::span<const Mat> grads) {
  if (params.size() != grads.size()) throw InvalidArgument("adam_step: params/grads count differ");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Mat::Zero(p.rows(), p.cols()));
      state.v.push_back(Mat::Zero(p.rows(), p.cols()));
    }
  }
  if (state.m.size() != params.size()) throw InvalidArgument("adam_step: state/params count differ");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Mat& g = grads[i];
    if (g.rows() != params[i].rows() || g.cols() != params[i].cols())
      throw InvalidArgument("adam_step: gradient shape mismatch");
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g.cwiseProduct(g);
    params[i].array() -= state.lr * (state.m[i].array() / c1) /
                         ((state.v[i].array() / c2).sqrt() + state.epsilon);
  }
}

void adam_step(AdamState& state, const std::vector<Tensor>& params) {
  std::vector<Mat> values, grads;
  values.reserve(params.size());
  grads.reserve(params.size());
  for (const auto& p : params) {
    values.push_back(p.value());
    grads.push_back(p.grad().size() ? p.grad() : Mat::Zero(p.rows(), p.cols()));
  }
  adam_step(state, std::span<Mat>(values), std::span<const Mat>(grads));
  for (std::size_t i = 0; i < params.size(); ++i) params[i].data() = std::move(values[i]);
}

double gradient_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                      const GradientCheckOptions& options) {
  std::vector<Mat> originals;
  for (const auto& p : params) originals.push_back(p.value());
  Rng rng = make_rng(derive_seed(options.seed, "gradient_check"));
  if (options.jitter > 0.0)
    for (const auto& p : params)
      for (Eigen::Index i = 0; i < p.size(); ++i)
        p.data().data()[i] += uniform(rng, -options.jitter, options.jitter);

  for (const auto& p : params) p.zero_grad();
  backward(loss_fn());
  std::vector<Mat> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());

  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (Eigen::Index i = 0; i < params[k].size(); ++i) coords.emplace_back(k, i);
  if (coords.size() > options.max_coordinates) {
    for (std::size_t i = 0; i < options.max_coordinates; ++i) {
      const auto j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(options.max_coordinates);
  }

  double worst = 0.0;
  for (const auto& [k, i] : coords) {
    double& x = params[k].data().data()[i];
    const double saved = x;
    x = saved + options.h;
    const double fp = loss_fn().item();
    x = saved - options.h;
    const double fm = loss_fn().item();
    x = saved;
    const double numeric = (fp - fm) / (2.0 * options.h);
    const double a = analytic[k].data()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }

  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k].data() = originals[k];
    params[k].zero_grad();
  }
  return worst;
}

namespace {

nlohmann::json matrix_json(const Mat& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  return {{"shape", {m.rows(), m.cols()}}, {"data", flat}};
}

Mat matrix_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto flat = j.at("data").get<std::vector<double>>();
  if (shape.size() != 2 || static_cast<Eigen::Index>(flat.size()) != shape[0] * shape[1])
    throw InvalidArgument("tensor record: data length does not match shape");
  Mat m(shape[0], shape[1]);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

}  // namespace

nlohmann::json mlp_to_json(const MlpParams& params) {
  nlohmann::json j;
  j["format"] = kMlpFormat;
  j["activation"] = to_string(params.activation);
  j["in_dim"] = params.in_dim;
  j["out_dim"] = params.out_dim;
  j["hidden_dim"] = params.hidden_dim;
  j["depth"] = params.depth;
  auto layers = nlohmann::json::array();
  for (const auto& l : params.layers)
    layers.push_back({{"weight", matrix_json(l.weight.value())}, {"bias", matrix_json(l.bias.value())}});
  j["layers"] = std::move(layers);
  return j;
}

MlpParams mlp_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kMlpFormat)
      throw InvalidArgument("unsupported MLP checkpoint format");
    MlpParams p;
    p.activation = activation_from_string(j.at("activation").get<std::string>());
    p.in_dim = j.at("in_dim").get<int>();
    p.out_dim = j.at("out_dim").get<int>();
    p.hidden_dim = j.at("hidden_dim").get<int>();
    p.depth = j.at("depth").get<int>();
    for (const auto& l : j.at("layers"))
      p.layers.push_back({Tensor::parameter(matrix_from_json(l.at("weight"))),
                          Tensor::parameter(matrix_from_json(l.at("bias")))});
    if (static_cast<int>(p.layers.size()) != p.depth)
      throw InvalidArgument("MLP checkpoint: layer count differs from depth");
    Eigen::Index width = p.in_dim;
    for (const auto& l : p.layers) {
      if (l.weight.rows() != width || l.bias.rows() != 1 || l.bias.cols() != l.weight.cols())
        throw InvalidArgument("MLP checkpoint: layer shapes do not chain");
      width = l.weight.cols();
    }
    if (width != p.out_dim) throw InvalidArgument("MLP checkpoint: output width differs from out_dim");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed MLP checkpoint: ") + e.what());
  }
}

}  // namespace dynident::nn
