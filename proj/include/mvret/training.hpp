#pragma once

// Metric-learning loop: multi-similarity loss with pair mining, PK batches,
// SGD with momentum and milestone decay, the MLP baseline adapter, and the
// joint CAM + VFS fit.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvret/cam.hpp"
#include "mvret/dataset.hpp"
#include "mvret/rng.hpp"
#include "mvret/tensor.hpp"
#include "mvret/vfs.hpp"

namespace mvret {

struct MsLossParams {
  double alpha = 2.0;
  double beta = 50.0;
  double lambda_thresh = 0.5;
  double margin = 0.1;
};

struct MsLossResult {
  double loss = 0.0;
  Tensor grad;                    // d loss / d descriptors, [B, d]
  std::size_t active_anchors = 0;
  /// Smallest |S - threshold| over all mining comparisons with a finite
  /// threshold; finite differences are only meaningful when this is not tiny.
  double boundary_gap = 0.0;
};

/// descriptors [B, d], rows unit-norm within 1e-6 (ErrorKind::numeric
/// otherwise). Mining is inclusive at the boundary; an empty extremum set
/// counts as +inf. Mean over anchors with a nonempty mined set.
MsLossResult ms_loss(const Tensor& descriptors, std::span<const std::size_t> labels,
                     const MsLossParams& params = {});

// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr_adapter = 1e-3;
  double lr_vfs = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 70;
  std::vector<std::size_t> milestones{20, 40};  // 0-indexed epochs
  double gamma = 0.1;
  std::size_t classes_per_batch = 2;     // P
  std::size_t instances_per_class = 4;   // K
  std::uint64_t seed = 0;
  bool vfs_enabled = true;
  std::optional<std::size_t> few_shot_limit;
  MsLossParams loss;

  /// Throws ErrorKind::config.
  void validate() const;
};

double lr_at_epoch(const TrainConfig& config, LearningGroup group, std::size_t epoch);

struct OptimizerState {
  std::size_t epoch = 0;
  double lr_adapter = 0.0;
  double lr_vfs = 0.0;

  double lr(LearningGroup group) const { return group == LearningGroup::vfs ? lr_vfs : lr_adapter; }
};

OptimizerState optimizer_state_at(const TrainConfig& config, std::size_t epoch);

/// g = grad + wd * value (decay-exempt blocks skip the wd term);
/// buf = momentum * buf + g; value -= lr * buf; grad = 0.
/// A non-finite gradient throws ErrorKind::numeric naming the block, before
/// any block is modified.
void sgd_momentum_step(std::span<ParamBlock* const> params, const OptimizerState& state,
                       const TrainConfig& config);

// ---------------------------------------------------------------------------

struct TrainIndex {
  std::vector<std::size_t> classes;               // label indices, ascending
  std::vector<std::vector<std::size_t>> members;  // object indices per class
  std::size_t size() const;
};

/// Train-split objects grouped by label. few_shot_limit keeps a seeded random
/// subset of at most that many objects per class.
TrainIndex build_train_index(const DatasetManifest& manifest,
                             std::optional<std::size_t> few_shot_limit, std::uint64_t seed);

/// P distinct classes, K objects each (without replacement when the class is
/// large enough, with replacement otherwise). Class-major order.
std::vector<std::size_t> pk_sample_batch(const TrainIndex& index, std::size_t P, std::size_t K,
                                         Rng& rng);

// ---------------------------------------------------------------------------
// MLP baseline adapter: mean-pool -> D -> D/4 -> D/4 -> D, then the same
// lambda fusion with the pooled feature as CAM.

struct MlpParameters {
  ParamBlock w1, b1, w2, b2, w3, b3;

  std::vector<ParamBlock*> params();
  std::vector<const ParamBlock*> params() const;
  std::size_t hidden() const { return w1.value.dim(0); }
};

/// PyTorch-style init: weights and biases uniform in +-1/sqrt(fan_in).
MlpParameters init_mlp_parameters(std::size_t dim, Rng& rng);

struct MlpCache {
  Tensor gap;     // [B, d]
  Tensor h1, h2;  // pre-activations
  Tensor fused;   // before normalization
};

struct MlpOutput {
  Tensor descriptors;
  MlpCache cache;
};

MlpOutput mlp_forward(const Tensor& batch, double lambda, bool normalize, const MlpParameters& params);
/// Accumulates parameter gradients; returns d loss / d batch [B, M, d].
Tensor mlp_backward(const Tensor& grad_descriptors, const MlpCache& cache, std::size_t views,
                    double lambda, bool normalize, MlpParameters& params);

// ---------------------------------------------------------------------------

enum class AdapterKind { cam, mlp };

std::string_view to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(std::string_view text);

struct VfsConfig {
  std::size_t E = 40;
  SelectionMode mode = SelectionMode::random_e;
  /// Restricts the lexicon to these names (matched case-insensitively against
  /// the dataset's lexicon, which carries the text rows). Empty = all.
  std::vector<std::string> lexicon;
  /// Weight of the seen-to-seen alignment term on psi; 0 disables it.
  double align_weight = 1.0;
  std::size_t hidden = 0;  // psi hidden width, 0 = d
};

struct Model {
  AdapterKind adapter = AdapterKind::cam;
  CamConfig cam_config;  // lambda / normalization are shared by both adapters
  CamParameters cam;
  std::optional<MlpParameters> mlp;
  std::optional<VfsParameters> vfs;

  std::vector<ParamBlock*> params();
  std::vector<const ParamBlock*> params() const;
};

/// Parameters are drawn from streams derived from `seed`, one per component,
/// so enabling VFS does not change the adapter initialization.
Model init_model(AdapterKind adapter, const CamConfig& cam_config, std::size_t clip_dim,
                 const VfsConfig& vfs_config, std::uint64_t seed);

/// Eval-mode descriptors for views [N, M, d].
Tensor describe(const Model& model, const Tensor& views);

struct StepLoss {
  double ms = 0.0;
  double align = 0.0;
  double total = 0.0;
  double boundary_gap = 0.0;
  double kink_gap = 0.0;  // smallest |pre-activation| at any ReLU in the step
};

/// One training objective evaluation. Owns the dataset views it needs and
/// everything the virtual branch draws from; the fit loop and the gradient
/// tests share it.
class TrainingProblem {
 public:
  /// Throws ErrorKind::unavailable when VFS is requested but the dataset has
  /// no clip features or text table.
  TrainingProblem(const Dataset& dataset, Model& model, const TrainConfig& train,
                  const VfsConfig& vfs);

  const TrainIndex& index() const { return index_; }
  const EnrichedLabelSpace* label_space() const { return space_ ? &*space_ : nullptr; }
  bool vfs_active() const { return space_.has_value(); }

  /// random_e concept subset for an epoch (seed = train seed + epoch);
  /// empty for top_e or without VFS.
  std::vector<std::size_t> epoch_selection(std::size_t epoch) const;

  /// Loss on the objects `batch`; `step_seed` drives the virtual concept and
  /// alignment draws. With `backward` the parameter grads are accumulated.
  StepLoss step(std::span<const std::size_t> batch, std::span<const std::size_t> selected,
                std::uint64_t step_seed, bool backward, bool update_running_stats);

 private:
  const Dataset& data_;
  Model& model_;
  TrainConfig train_;
  VfsConfig vfs_config_;
  TrainIndex index_;
  std::optional<EnrichedLabelSpace> space_;
  Tensor vfs_text_;         // label rows followed by the active lexicon rows
  Tensor class_dino_mean_;  // [C, d], train classes only
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr_adapter = 0.0;
  double lr_vfs = 0.0;
};

struct FitResult {
  Model model;
  std::vector<EpochLog> log;
  bool vfs_used = false;
  std::vector<std::string> warnings;
};

/// Deterministic given the configs and train.seed. VFS requested on a dataset
/// without clip/text data falls back to adapter-only training with a warning.
FitResult fit(const Dataset& dataset, AdapterKind adapter, const CamConfig& cam_config,
              const TrainConfig& train, const VfsConfig& vfs);

/// One JSON object per line: {"epoch", "mean_loss", "lr_adapter", "lr_vfs"}.
std::string serialize_training_log(const std::vector<EpochLog>& log);

// ---------------------------------------------------------------------------
// Parameter files: params.json (layout + configs) and params.f64le (raw
// little-endian doubles in layout order).

void save_model(const Model& model, const std::filesystem::path& dir, const std::string& meta_json = "{}");
/// Throws ErrorKind::io / ErrorKind::format.
Model load_model(const std::filesystem::path& dir);

}  // namespace mvret
