#include "dynident/multiview.hpp"

#include "dynident/errors.hpp"
#include "dynident/parallel.hpp"
#include "dynident/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace dynident {

using nn::Tensor;

PartitionLayout PartitionLayout::contiguous(int latent_dim, int n_blocks, int shared_block) {
  if (n_blocks < 1 || latent_dim < n_blocks)
    throw InvalidArgument("partition: need 1 <= n_blocks <= latent_dim");
  PartitionLayout p;
  p.latent_dim = latent_dim;
  p.shared_block = shared_block;
  int start = 0;
  for (int b = 0; b < n_blocks; ++b) {
    const int size = latent_dim / n_blocks + (b < latent_dim % n_blocks ? 1 : 0);
    std::vector<int> idx(static_cast<std::size_t>(size));
    std::iota(idx.begin(), idx.end(), start);
    start += size;
    p.blocks.push_back(std::move(idx));
  }
  p.validate();
  return p;
}

void PartitionLayout::validate() const {
  if (latent_dim < 1) throw InvalidArgument("partition: latent_dim must be positive");
  if (blocks.empty()) throw InvalidArgument("partition: no blocks");
  if (shared_block < 0 || shared_block >= static_cast<int>(blocks.size()))
    throw InvalidArgument("partition: shared_block out of range");
  std::vector<int> seen(static_cast<std::size_t>(latent_dim), 0);
  for (const auto& b : blocks) {
    if (b.empty()) throw InvalidArgument("partition: empty block");
    for (int i : b) {
      if (i < 0 || i >= latent_dim) throw InvalidArgument("partition: index out of range");
      if (seen[static_cast<std::size_t>(i)]++) throw InvalidArgument("partition: blocks overlap");
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw InvalidArgument("partition: blocks do not cover the latent range");
}

// ---------------------------------------------------------------- datasets

namespace {

Vec draw_in_box(const OdeSystem& system, Rng& rng) {
  Vec theta(system.param_dim);
  for (int k = 0; k < system.param_dim; ++k) {
    const auto& b = system.param_box[static_cast<std::size_t>(k)];
    theta[k] = uniform(rng, b.lo, b.hi);
  }
  return theta;
}

Vec resample_outside(const OdeSystem& system, const Vec& base, const std::vector<int>& keep, Rng& rng) {
  Vec theta = draw_in_box(system, rng);
  for (int k : keep) theta[k] = base[k];
  return theta;
}

void check_index_set(const OdeSystem& system, const std::vector<int>& s, const char* what) {
  std::set<int> uniq(s.begin(), s.end());
  if (uniq.size() != s.size()) throw InvalidArgument(std::string(what) + ": duplicate index");
  for (int k : s)
    if (k < 0 || k >= system.param_dim)
      throw InvalidArgument(std::string(what) + ": index " + std::to_string(k) + " out of range for " +
                            system.id);
  if (s.empty()) throw InvalidArgument(std::string(what) + ": nothing is shared");
  if (static_cast<int>(s.size()) == system.param_dim)
    throw InvalidArgument(std::string(what) + ": every parameter is shared, nothing to disentangle");
}

}  // namespace

MultiviewDataset generate_multiview_dataset(const OdeSystem& system, const std::vector<int>& shared,
                                            int n_pairs, std::uint64_t seed,
                                            const MultiviewSynthOptions& options) {
  check_index_set(system, shared, "shared set");
  if (n_pairs < 1) throw InvalidArgument("generate_multiview_dataset: n_pairs must be >= 1");
  if (options.n_views != 2 && options.n_views != 3)
    throw InvalidArgument("generate_multiview_dataset: n_views must be 2 or 3");
  if (options.ic_jitter < 0.0) throw InvalidArgument("generate_multiview_dataset: negative jitter");
  const std::vector<int> third = options.third_view_shared.empty() ? shared : options.third_view_shared;
  if (options.n_views == 3) check_index_set(system, third, "third view shared set");

  std::vector<ViewLink> links{{0, 1, shared, 0}};
  if (options.n_views == 3) links.push_back({0, 2, third, options.third_view_block});

  const auto grid = default_grid(system);
  const std::uint64_t root = derive_seed(seed, "multiview.pairs");
  MultiviewDataset ds;
  ds.system_id = system.id;
  ds.pairs.resize(static_cast<std::size_t>(n_pairs));

  parallel_for(ds.pairs.size(), options.threads, [&](std::size_t i) {
    Rng rng = make_rng(derive_seed(root, static_cast<std::uint64_t>(i)));
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 100)
        throw NumericDomainError(system.id + ": could not draw an integrable multiview pair");
      MultiviewPair pair;
      pair.shared_indices = shared;
      pair.links = links;
      std::vector<Vec> thetas{draw_in_box(system, rng)};
      thetas.push_back(resample_outside(system, thetas[0], shared, rng));
      if (options.n_views == 3) thetas.push_back(resample_outside(system, thetas[0], third, rng));
      try {
        for (const auto& th : thetas) {
          Vec x0 = system.x0;
          if (options.ic_jitter > 0.0)
            for (Eigen::Index c = 0; c < x0.size(); ++c) x0[c] += options.ic_jitter * standard_normal(rng);
          pair.views.push_back(integrate(system, th, x0, grid));
        }
      } catch (const DivergenceError&) {
        continue;
      } catch (const NumericDomainError&) {
        continue;
      }
      ds.pairs[i] = std::move(pair);
      return;
    }
  });
  return ds;
}

void validate_pair(const MultiviewPair& pair) {
  const auto n = pair.views.size();
  if (n != 2 && n != 3) throw InvalidArgument("multiview pair needs 2 or 3 views");
  if (pair.links.empty()) throw InvalidArgument("multiview pair has no links");
  const auto& v0 = pair.views.front();
  for (const auto& v : pair.views) {
    if (!v.theta_truth) throw InvalidArgument("multiview view is missing theta");
    if (v.length() != v0.length() || v.dim() != v0.dim() ||
        v.theta_truth->size() != v0.theta_truth->size())
      throw InvalidArgument("multiview views have inconsistent shapes");
  }
  for (const auto& l : pair.links) {
    if (l.view_a < 0 || l.view_b < 0 || l.view_a >= static_cast<int>(n) ||
        l.view_b >= static_cast<int>(n) || l.view_a == l.view_b)
      throw InvalidArgument("multiview link references an invalid view");
    const Vec& a = *pair.views[static_cast<std::size_t>(l.view_a)].theta_truth;
    const Vec& b = *pair.views[static_cast<std::size_t>(l.view_b)].theta_truth;
    for (int k : l.params) {
      if (k < 0 || k >= a.size()) throw InvalidArgument("multiview link parameter out of range");
      if (a[k] != b[k])
        throw InvalidArgument("multiview link: shared parameter " + std::to_string(k) + " differs");
    }
    if (a == b) throw InvalidArgument("multiview link: views share every parameter");
  }
}

nlohmann::json pair_to_json(const MultiviewPair& pair) {
  nlohmann::json j;
  j["format"] = kMultiviewFormat;
  j["shared"] = pair.shared_indices;
  j["links"] = nlohmann::json::array();
  for (const auto& l : pair.links)
    j["links"].push_back({{"a", l.view_a}, {"b", l.view_b}, {"params", l.params}, {"block", l.block}});
  j["views"] = nlohmann::json::array();
  for (const auto& v : pair.views) j["views"].push_back(trajectory_to_json(v));
  if (pair.causal)
    j["causal"] = {{"slice", pair.causal->slice},
                   {"treatment", pair.causal->treatment},
                   {"outcome", pair.causal->outcome}};
  return j;
}

MultiviewPair pair_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kMultiviewFormat)
      throw InvalidArgument("unsupported multiview record format");
    MultiviewPair p;
    p.shared_indices = j.at("shared").get<std::vector<int>>();
    for (const auto& l : j.at("links"))
      p.links.push_back({l.at("a").get<int>(), l.at("b").get<int>(), l.at("params").get<std::vector<int>>(),
                         l.at("block").get<int>()});
    for (const auto& v : j.at("views")) p.views.push_back(trajectory_from_json(v));
    if (j.contains("causal")) {
      const auto& c = j.at("causal");
      p.causal = CausalLabels{c.at("slice").get<int>(), c.at("treatment").get<int>(),
                              c.at("outcome").get<double>()};
    }
    validate_pair(p);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed multiview record: ") + e.what());
  }
}

void write_multiview_jsonl(const std::filesystem::path& path, const MultiviewDataset& dataset) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& p : dataset.pairs) out << pair_to_json(p).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

MultiviewDataset read_multiview_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  MultiviewDataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidArgument("line " + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    ds.pairs.push_back(pair_from_json(j));
  }
  if (ds.pairs.empty()) throw InvalidArgument("'" + path.string() + "' holds no multiview pairs");
  ds.system_id = ds.pairs.front().views.front().system_id;
  return ds;
}

// ---------------------------------------------------------------- model

std::string to_string(DecoderKind kind) { return kind == DecoderKind::mlp ? "mlp" : "vector_field"; }

DecoderKind decoder_kind_from_string(const std::string& name) {
  if (name == "mlp") return DecoderKind::mlp;
  if (name == "vector_field") return DecoderKind::vector_field;
  throw InvalidArgument("unknown decoder '" + name + "' (expected mlp|vector_field)");
}

int Preprocessing::keep_count() const { return dct_keep_count(length, keep_fraction); }

void IdentifierModel::validate() const {
  layout.validate();
  const int td = prep.length * prep.state_dim;
  if (prep.length < 2 || prep.state_dim < 1) throw InvalidArgument("identifier: bad preprocessing shape");
  if (prep.n_init < 1 || prep.n_init > prep.length) throw InvalidArgument("identifier: n_init out of range");
  if (prep.mean.size() != prep.state_dim || prep.scale.size() != prep.state_dim)
    throw InvalidArgument("identifier: normalization stats have the wrong size");
  if (encoder.in_dim != prep.encoder_in_dim() || encoder.out_dim != layout.latent_dim)
    throw InvalidArgument("identifier: encoder shape does not match the data");
  if (decoder_kind == DecoderKind::mlp) {
    if (decoder.in_dim != layout.latent_dim + prep.n_init * prep.state_dim || decoder.out_dim != td)
      throw InvalidArgument("identifier: decoder shape does not match the data");
  } else {
    if (decoder.in_dim != layout.latent_dim + prep.state_dim || decoder.out_dim != prep.state_dim)
      throw InvalidArgument("identifier: vector-field decoder shape does not match the data");
    if (vf_substeps < 1) throw InvalidArgument("identifier: vf_substeps must be >= 1");
  }
}

IdentifierModel IdentifierModel::clone() const {
  IdentifierModel m = *this;
  m.encoder = encoder.clone();
  m.decoder = decoder.clone();
  return m;
}

std::vector<Tensor> IdentifierModel::parameters() const {
  auto p = encoder.parameters();
  for (auto& t : decoder.parameters()) p.push_back(t);
  return p;
}

IdentifierModel init_identifier(const MultiviewDataset& dataset, const IdentifierConfig& config,
                                std::uint64_t seed) {
  if (dataset.pairs.empty()) throw InvalidArgument("init_identifier: empty dataset");
  IdentifierModel m;
  m.layout = PartitionLayout::contiguous(config.latent_dim, config.n_blocks, config.shared_block);
  m.decoder_kind = config.decoder;
  m.vf_substeps = config.vf_substeps;
  if (!(config.keep_fraction > 0.0 && config.keep_fraction <= 1.0))
    throw InvalidArgument("init_identifier: keep_fraction must be in (0, 1]");
  const auto& first = dataset.pairs.front().views.front();
  m.prep.keep_fraction = config.keep_fraction;
  m.prep.length = first.length();
  m.prep.state_dim = first.dim();
  m.prep.n_init = config.n_init;

  const int d = first.dim();
  Vec sum = Vec::Zero(d), sq = Vec::Zero(d);
  double count = 0.0;
  for (const auto& p : dataset.pairs)
    for (const auto& v : p.views) {
      if (v.length() != m.prep.length || v.dim() != d)
        throw InvalidArgument("init_identifier: trajectories differ in shape");
      sum += v.states.colwise().sum().transpose();
      count += static_cast<double>(v.length());
    }
  m.prep.mean = sum / count;
  for (const auto& p : dataset.pairs)
    for (const auto& v : p.views)
      sq += (v.states.rowwise() - m.prep.mean.transpose()).array().square().colwise().sum().matrix().transpose();
  m.prep.scale = (sq / count).cwiseSqrt();
  for (Eigen::Index c = 0; c < d; ++c)
    if (!(m.prep.scale[c] > 1e-12)) m.prep.scale[c] = 1.0;

  if (config.hidden_dim < 1 || config.depth < 1) throw InvalidArgument("init_identifier: bad network size");
  Rng rng = make_rng(derive_seed(seed, "identifier.init"));
  m.encoder = nn::make_mlp(m.prep.encoder_in_dim(), config.latent_dim, config.hidden_dim, config.depth,
                           config.activation, rng);
  if (config.decoder == DecoderKind::mlp)
    m.decoder = nn::make_mlp(config.latent_dim + config.n_init * d, m.prep.length * d, config.hidden_dim,
                             config.depth, config.activation, rng);
  else
    m.decoder = nn::make_mlp(config.latent_dim + d, d, config.hidden_dim, config.depth, config.activation, rng);
  m.validate();
  return m;
}

namespace {

Mat standardize(const Preprocessing& prep, const Mat& states) {
  if (states.rows() != prep.length || states.cols() != prep.state_dim)
    throw InvalidArgument("identifier: trajectory is " + std::to_string(states.rows()) + "x" +
                          std::to_string(states.cols()) + ", model expects " + std::to_string(prep.length) +
                          "x" + std::to_string(prep.state_dim));
  return ((states.rowwise() - prep.mean.transpose()).array().rowwise() / prep.scale.transpose().array()).matrix();
}

Vec flatten_rows(const Mat& m) {
  const Mat t = m.transpose();
  return Eigen::Map<const Vec>(t.data(), t.size());
}

// Per-model cache of preprocessed matrices for a fixed set of trajectories.
struct Prepared {
  Mat enc_in;   // n x in_dim
  Mat init;     // n x (n_init * d)
  Mat x0;       // n x d
  Mat target;   // n x (T * d)
};

Prepared prepare(const IdentifierModel& model, const std::vector<const Trajectory*>& trajs) {
  const auto& prep = model.prep;
  const int d = prep.state_dim, T = prep.length, keep = prep.keep_count();
  const Mat basis = dct_basis(T, keep);
  const auto n = static_cast<Eigen::Index>(trajs.size());
  Prepared out{Mat(n, prep.encoder_in_dim()), Mat(n, prep.n_init * d), Mat(n, d), Mat(n, T * d)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Mat z = standardize(prep, trajs[static_cast<std::size_t>(i)]->states);
    out.enc_in.row(i) = flatten_rows(basis.transpose() * z).transpose();
    out.init.row(i) = flatten_rows(z.topRows(prep.n_init)).transpose();
    out.x0.row(i) = z.row(0);
    out.target.row(i) = flatten_rows(z).transpose();
  }
  return out;
}

Tensor decode_tensor(const IdentifierModel& model, const Tensor& latent, const Mat& init, const Mat& x0) {
  if (model.decoder_kind == DecoderKind::mlp)
    return nn::mlp_forward(model.decoder, nn::concat_cols({latent, Tensor::constant(init)}));

  const int T = model.prep.length;
  const double dt = 1.0 / (static_cast<double>(T - 1) * model.vf_substeps);
  auto field = [&](const Tensor& x) { return nn::mlp_forward(model.decoder, nn::concat_cols({x, latent})); };
  Tensor x = Tensor::constant(x0);
  std::vector<Tensor> states{x};
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < model.vf_substeps; ++s) {
      const Tensor k1 = field(x);
      const Tensor k2 = field(x + (0.5 * dt) * k1);
      const Tensor k3 = field(x + (0.5 * dt) * k2);
      const Tensor k4 = field(x + dt * k3);
      x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    states.push_back(x);
  }
  return nn::concat_cols(states);
}

struct BatchShape {
  std::size_t views = 0;
  std::vector<ViewLink> links;
};

BatchShape batch_shape(const std::vector<const MultiviewPair*>& batch) {
  if (batch.empty()) throw InvalidArgument("multiview_loss: empty batch");
  BatchShape s{batch.front()->views.size(), batch.front()->links};
  for (const auto* p : batch) {
    if (p->views.size() != s.views || p->links.size() != s.links.size())
      throw InvalidArgument("multiview_loss: pairs in a batch must share view and link structure");
    for (std::size_t k = 0; k < s.links.size(); ++k)
      if (p->links[k].view_a != s.links[k].view_a || p->links[k].view_b != s.links[k].view_b ||
          p->links[k].block != s.links[k].block)
        throw InvalidArgument("multiview_loss: pairs in a batch must share link structure");
  }
  return s;
}

// Rows are view-major: view v of batch item i sits at row v * B + i.
MultiviewLoss loss_from_prepared(const IdentifierModel& model, const Prepared& data, const BatchShape& shape,
                                 Eigen::Index batch_size, double reg_align, bool shared_only = false) {
  for (const auto& l : shape.links)
    if (l.block < 0 || l.block >= static_cast<int>(model.layout.blocks.size()))
      throw InvalidArgument("multiview_loss: link block " + std::to_string(l.block) + " not in layout");
  const Tensor z = nn::mlp_forward(model.encoder, Tensor::constant(data.enc_in));
  Tensor z_dec = z;
  if (shared_only) {
    Mat mask = Mat::Zero(z.rows(), z.cols());
    for (int k : model.layout.shared()) mask.col(k).setOnes();
    z_dec = nn::mul(z, Tensor::constant(std::move(mask)));
  }
  const Tensor recon = decode_tensor(model, z_dec, data.init, data.x0);
  const Tensor suff = nn::sum_squares(recon - Tensor::constant(data.target));

  Tensor align = Tensor::constant(Mat::Zero(1, 1));
  for (const auto& l : shape.links) {
    const auto& idx = model.layout.blocks[static_cast<std::size_t>(l.block)];
    const Tensor za = nn::cols(nn::slice_rows(z, l.view_a * batch_size, batch_size), idx);
    const Tensor zb = nn::cols(nn::slice_rows(z, l.view_b * batch_size, batch_size), idx);
    align = align + nn::sum_squares(za - zb);
  }
  const double inv_b = 1.0 / static_cast<double>(batch_size);
  MultiviewLoss out;
  out.alignment = align.item() * inv_b;
  out.sufficiency = suff.item() * inv_b;
  out.total = inv_b * (reg_align * align + suff);
  return out;
}

Prepared prepare_batch(const IdentifierModel& model, const std::vector<const MultiviewPair*>& batch,
                       std::size_t views) {
  std::vector<const Trajectory*> trajs;
  trajs.reserve(views * batch.size());
  for (std::size_t v = 0; v < views; ++v)
    for (const auto* p : batch) trajs.push_back(&p->views[v]);
  return prepare(model, trajs);
}

Prepared gather_rows(const Prepared& all, const std::vector<Eigen::Index>& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  Prepared out{Mat(n, all.enc_in.cols()), Mat(n, all.init.cols()), Mat(n, all.x0.cols()),
               Mat(n, all.target.cols())};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)];
    out.enc_in.row(i) = all.enc_in.row(r);
    out.init.row(i) = all.init.row(r);
    out.x0.row(i) = all.x0.row(r);
    out.target.row(i) = all.target.row(r);
  }
  return out;
}

}  // namespace

Vec encoder_input(const IdentifierModel& model, const Trajectory& traj) {
  return prepare(model, {&traj}).enc_in.row(0).transpose();
}

MultiviewLoss multiview_loss(const IdentifierModel& model, const std::vector<const MultiviewPair*>& batch,
                             double reg_align) {
  const auto shape = batch_shape(batch);
  return loss_from_prepared(model, prepare_batch(model, batch, shape.views), shape,
                            static_cast<Eigen::Index>(batch.size()), reg_align);
}

MultiviewLoss multiview_loss(const IdentifierModel& model, const MultiviewPair& pair, double reg_align) {
  return multiview_loss(model, std::vector<const MultiviewPair*>{&pair}, reg_align);
}

TrainResult train_identifier(const MultiviewDataset& dataset, const TrainConfig& config) {
  if (dataset.pairs.empty()) throw InvalidArgument("train_identifier: empty dataset");
  if (config.epochs < 0) throw InvalidArgument("train_identifier: epochs must be >= 0");
  if (config.batch < 1) throw InvalidArgument("train_identifier: batch must be >= 1");
  if (!(config.lr >= 0.0) || !(config.reg_align >= 0.0))
    throw InvalidArgument("train_identifier: lr and reg_align must be nonnegative");

  if (config.shared_warmup_epochs < 0) throw InvalidArgument("train_identifier: shared_warmup_epochs must be >= 0");
  TrainResult result{init_identifier(dataset, config.model, config.seed), {}};
  IdentifierModel& model = result.model;
  if (config.shared_warmup_epochs > 0) {
    auto& last = model.encoder.layers.back();
    for (std::size_t b = 0; b < model.layout.blocks.size(); ++b) {
      if (static_cast<int>(b) == model.layout.shared_block) continue;
      for (int k : model.layout.blocks[b]) {
        last.weight.data().col(k).setZero();
        last.bias.data()(0, k) = 0.0;
      }
    }
  }

  std::vector<const MultiviewPair*> all;
  for (const auto& p : dataset.pairs) all.push_back(&p);
  const auto shape = batch_shape(all);
  const auto n_pairs = static_cast<Eigen::Index>(all.size());
  const Prepared data = prepare_batch(model, all, shape.views);

  const auto params = model.parameters();
  nn::AdamState adam;
  adam.lr = config.lr;
  Rng rng = make_rng(derive_seed(config.seed, "identifier.shuffle"));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_pairs));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    EpochLoss acc;
    int batch_index = 0;
    for (Eigen::Index start = 0; start < n_pairs; start += config.batch, ++batch_index) {
      const Eigen::Index b = std::min<Eigen::Index>(config.batch, n_pairs - start);
      std::vector<Eigen::Index> rows;
      rows.reserve(static_cast<std::size_t>(b) * shape.views);
      for (std::size_t v = 0; v < shape.views; ++v)
        for (Eigen::Index i = 0; i < b; ++i)
          rows.push_back(static_cast<Eigen::Index>(v) * n_pairs + order[static_cast<std::size_t>(start + i)]);
      const auto loss = loss_from_prepared(model, gather_rows(data, rows), shape, b, config.reg_align,
                                           epoch < config.shared_warmup_epochs);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << " batch " << batch_index << ": total=" << total
            << " alignment=" << loss.alignment << " sufficiency=" << loss.sufficiency;
        throw TrainingDiverged(msg.str());
      }
      for (const auto& t : params) t.zero_grad();
      nn::backward(loss.total);
      nn::adam_step(adam, params);
      const double w = static_cast<double>(b);
      acc.total += w * total;
      acc.alignment += w * loss.alignment;
      acc.sufficiency += w * loss.sufficiency;
    }
    const double inv = 1.0 / static_cast<double>(n_pairs);
    result.curve.push_back({acc.total * inv, acc.alignment * inv, acc.sufficiency * inv});
  }
  return result;
}

Mat encode_all(const IdentifierModel& model, const std::vector<const Trajectory*>& trajs) {
  if (trajs.empty()) return Mat(0, model.layout.latent_dim);
  const Prepared data = prepare(model, trajs);
  return nn::mlp_forward(model.encoder, Tensor::constant(data.enc_in)).value();
}

Vec encode(const IdentifierModel& model, const Trajectory& traj) {
  return encode_all(model, {&traj}).row(0).transpose();
}

Mat decode_forecast(const IdentifierModel& model, const Vec& latent, const Mat& initial_states) {
  const auto& prep = model.prep;
  if (latent.size() != model.layout.latent_dim)
    throw InvalidArgument("decode_forecast: latent has dimension " + std::to_string(latent.size()) +
                          ", expected " + std::to_string(model.layout.latent_dim));
  if (initial_states.rows() != prep.n_init || initial_states.cols() != prep.state_dim)
    throw InvalidArgument("decode_forecast: expected " + std::to_string(prep.n_init) + "x" +
                          std::to_string(prep.state_dim) + " initial states");
  const Mat z = ((initial_states.rowwise() - prep.mean.transpose()).array().rowwise() /
                 prep.scale.transpose().array()).matrix();
  const Mat out = decode_tensor(model, Tensor::constant(latent.transpose()),
                                flatten_rows(z).transpose(), z.row(0)).value();
  Mat traj(prep.length, prep.state_dim);
  for (int t = 0; t < prep.length; ++t)
    for (int c = 0; c < prep.state_dim; ++c)
      traj(t, c) = out(0, t * prep.state_dim + c) * prep.scale[c] + prep.mean[c];
  return traj;
}

double forecast_error(const IdentifierModel& model, const Trajectory& traj) {
  const int n0 = model.prep.n_init;
  if (traj.length() != model.prep.length || traj.dim() != model.prep.state_dim)
    throw InvalidArgument("forecast_error: trajectory shape does not match the model");
  if (n0 >= traj.length()) throw InvalidArgument("forecast_error: no forecast horizon after n_init");
  const Mat pred = decode_forecast(model, encode(model, traj), traj.states.topRows(n0));
  const auto h = traj.length() - n0;
  return (pred.bottomRows(h) - traj.states.bottomRows(h)).squaredNorm() / static_cast<double>(h * traj.dim());
}

double reconstruction_error(const IdentifierModel& model, const Trajectory& traj) {
  const Prepared data = prepare(model, {&traj});
  const Tensor z = nn::mlp_forward(model.encoder, Tensor::constant(data.enc_in));
  return (decode_tensor(model, z, data.init, data.x0).value() - data.target).squaredNorm();
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

}  // namespace

std::vector<double> alignment_ratios(const IdentifierModel& model, const MultiviewDataset& dataset) {
  std::vector<const Trajectory*> a, b;
  for (const auto& p : dataset.pairs) {
    if (p.links.empty()) continue;
    a.push_back(&p.views[static_cast<std::size_t>(p.links[0].view_a)]);
    b.push_back(&p.views[static_cast<std::size_t>(p.links[0].view_b)]);
  }
  const Mat za = encode_all(model, a), zb = encode_all(model, b);
  auto block_median = [&](const std::vector<int>& idx) {
    std::vector<double> d;
    for (Eigen::Index i = 0; i < za.rows(); ++i) {
      double s = 0.0;
      for (int k : idx) s += (za(i, k) - zb(i, k)) * (za(i, k) - zb(i, k));
      d.push_back(std::sqrt(s));
    }
    return median(std::move(d));
  };
  const double shared = block_median(model.layout.shared());
  std::vector<double> ratios;
  for (std::size_t k = 0; k < model.layout.blocks.size(); ++k)
    if (static_cast<int>(k) != model.layout.shared_block)
      ratios.push_back(shared / block_median(model.layout.blocks[k]));
  return ratios;
}

nlohmann::json identifier_to_json(const IdentifierModel& model) {
  nlohmann::json j;
  j["format"] = kIdentifierFormat;
  j["layout"] = {{"latent_dim", model.layout.latent_dim},
                 {"blocks", model.layout.blocks},
                 {"shared_block", model.layout.shared_block}};
  j["preprocessing"] = {{"keep_fraction", model.prep.keep_fraction},
                        {"length", model.prep.length},
                        {"state_dim", model.prep.state_dim},
                        {"n_init", model.prep.n_init},
                        {"mean", std::vector<double>(model.prep.mean.begin(), model.prep.mean.end())},
                        {"scale", std::vector<double>(model.prep.scale.begin(), model.prep.scale.end())}};
  j["decoder_kind"] = to_string(model.decoder_kind);
  j["vf_substeps"] = model.vf_substeps;
  j["encoder"] = nn::mlp_to_json(model.encoder);
  j["decoder"] = nn::mlp_to_json(model.decoder);
  return j;
}

IdentifierModel identifier_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kIdentifierFormat)
      throw InvalidArgument("unsupported identifier checkpoint format");
    IdentifierModel m;
    const auto& l = j.at("layout");
    m.layout.latent_dim = l.at("latent_dim").get<int>();
    m.layout.blocks = l.at("blocks").get<std::vector<std::vector<int>>>();
    m.layout.shared_block = l.at("shared_block").get<int>();
    const auto& p = j.at("preprocessing");
    m.prep.keep_fraction = p.at("keep_fraction").get<double>();
    m.prep.length = p.at("length").get<int>();
    m.prep.state_dim = p.at("state_dim").get<int>();
    m.prep.n_init = p.at("n_init").get<int>();
    const auto mean = p.at("mean").get<std::vector<double>>();
    const auto scale = p.at("scale").get<std::vector<double>>();
    m.prep.mean = Eigen::Map<const Vec>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    m.prep.scale = Eigen::Map<const Vec>(scale.data(), static_cast<Eigen::Index>(scale.size()));
    m.decoder_kind = decoder_kind_from_string(j.at("decoder_kind").get<std::string>());
    m.vf_substeps = j.at("vf_substeps").get<int>();
    m.encoder = nn::mlp_from_json(j.at("encoder"));
    m.decoder = nn::mlp_from_json(j.at("decoder"));
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed identifier checkpoint: ") + e.what());
  }
}

}  // namespace dynident
