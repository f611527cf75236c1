#pragma once

// Multiview partial identification: paired trajectories sharing a parameter
// block, an encoder/decoder identifier and the alignment + sufficiency loss.

#include "dynident/nn.hpp"
#include "dynident/solver.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace dynident {

struct PartitionLayout {
  int latent_dim = 0;
  std::vector<std::vector<int>> blocks;
  int shared_block = 0;

  // n_blocks contiguous blocks of equal size.
  static PartitionLayout contiguous(int latent_dim, int n_blocks, int shared_block = 0);
  void validate() const;  // throws InvalidArgument
  const std::vector<int>& shared() const { return blocks.at(static_cast<std::size_t>(shared_block)); }
};

// Views a and b agree on `params`; their latents are aligned on `block`.
struct ViewLink {
  int view_a = 0;
  int view_b = 1;
  std::vector<int> params;
  int block = 0;
};

struct CausalLabels {
  int slice = 0;
  int treatment = 0;
  double outcome = 0.0;
};

struct MultiviewPair {
  std::vector<Trajectory> views;  // 2 or 3; theta_truth is set on every view
  std::vector<int> shared_indices;
  std::vector<ViewLink> links;
  std::optional<CausalLabels> causal;
};

struct MultiviewDataset {
  std::string system_id;
  std::vector<MultiviewPair> pairs;

  int view_count() const { return pairs.empty() ? 0 : static_cast<int>(pairs.front().views.size()); }
};

struct MultiviewSynthOptions {
  int n_views = 2;
  // Parameters the third view shares with the first; empty means S.
  std::vector<int> third_view_shared;
  int third_view_block = 1;
  double ic_jitter = 0.0;  // additive N(0, jitter^2) on each view's initial state
  int threads = 1;
};

MultiviewDataset generate_multiview_dataset(const OdeSystem& system, const std::vector<int>& shared,
                                            int n_pairs, std::uint64_t seed,
                                            const MultiviewSynthOptions& options = {});

// Throws InvalidArgument when a link's parameters differ, when linked views
// agree everywhere, or when shapes are inconsistent.
void validate_pair(const MultiviewPair& pair);

inline constexpr const char* kMultiviewFormat = "dynident-mv/1";
nlohmann::json pair_to_json(const MultiviewPair& pair);
MultiviewPair pair_from_json(const nlohmann::json& j);
void write_multiview_jsonl(const std::filesystem::path& path, const MultiviewDataset& dataset);
MultiviewDataset read_multiview_jsonl(const std::filesystem::path& path);

enum class DecoderKind { mlp, vector_field };
std::string to_string(DecoderKind kind);
DecoderKind decoder_kind_from_string(const std::string& name);

struct Preprocessing {
  double keep_fraction = 0.5;
  int length = 0;  // T
  int state_dim = 0;
  int n_init = 10;
  Vec mean;   // per channel
  Vec scale;  // per channel

  int keep_count() const;
  int encoder_in_dim() const { return keep_count() * state_dim; }
};

struct IdentifierModel {
  nn::MlpParams encoder;
  nn::MlpParams decoder;
  PartitionLayout layout;
  Preprocessing prep;
  DecoderKind decoder_kind = DecoderKind::mlp;
  int vf_substeps = 1;

  void validate() const;
  IdentifierModel clone() const;
  std::vector<nn::Tensor> parameters() const;
};

struct IdentifierConfig {
  int latent_dim = 8;
  int n_blocks = 2;
  int shared_block = 0;
  int hidden_dim = 128;
  int depth = 4;
  nn::Activation activation = nn::Activation::tanh;
  double keep_fraction = 0.5;
  int n_init = 10;
  DecoderKind decoder = DecoderKind::mlp;
  int vf_substeps = 1;
};

// Normalization stats come from every view in the dataset.
IdentifierModel init_identifier(const MultiviewDataset& dataset, const IdentifierConfig& config,
                                std::uint64_t seed);

// Standardized, DCT-truncated, flattened encoder input (1 x in_dim).
Vec encoder_input(const IdentifierModel& model, const Trajectory& traj);

struct MultiviewLoss {
  nn::Tensor total;  // reg_align * alignment + sufficiency, averaged over pairs
  double alignment = 0.0;
  double sufficiency = 0.0;
};

MultiviewLoss multiview_loss(const IdentifierModel& model, const MultiviewPair& pair, double reg_align);
MultiviewLoss multiview_loss(const IdentifierModel& model, const std::vector<const MultiviewPair*>& batch,
                             double reg_align);

struct TrainConfig {
  int epochs = 300;
  int batch = 64;
  double lr = 1e-3;
  double reg_align = 10.0;
  std::uint64_t seed = 0;
  // For the first epochs the decoder sees only the shared block; the
  // non-shared encoder outputs start from zero weights when this is > 0.
  int shared_warmup_epochs = 0;
  IdentifierConfig model;
};

struct EpochLoss {
  double total = 0.0;
  double alignment = 0.0;
  double sufficiency = 0.0;
};

struct TrainResult {
  IdentifierModel model;
  std::vector<EpochLoss> curve;
};

// Throws TrainingDiverged on a non-finite loss, naming epoch, batch and components.
TrainResult train_identifier(const MultiviewDataset& dataset, const TrainConfig& config);

Vec encode(const IdentifierModel& model, const Trajectory& traj);
Mat encode_all(const IdentifierModel& model, const std::vector<const Trajectory*>& trajs);
// Full T x d trajectory in data units from a latent and the first n_init states.
Mat decode_forecast(const IdentifierModel& model, const Vec& latent, const Mat& initial_states);
// Mean squared error over rows [n_init, T) in data units.
double forecast_error(const IdentifierModel& model, const Trajectory& traj);
// Squared reconstruction error of one view in standardized units (one sufficiency term).
double reconstruction_error(const IdentifierModel& model, const Trajectory& traj);

// Per non-shared block b: median ||z_S - z~_S|| / median ||z_b - z~_b|| over
// the first link of every pair.
std::vector<double> alignment_ratios(const IdentifierModel& model, const MultiviewDataset& dataset);

inline constexpr const char* kIdentifierFormat = "dynident-identifier/1";
nlohmann::json identifier_to_json(const IdentifierModel& model);
IdentifierModel identifier_from_json(const nlohmann::json& j);

}  // namespace dynident
