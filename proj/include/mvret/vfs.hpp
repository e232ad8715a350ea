#pragma once

// Virtual feature synthesis: label-space enrichment from a lexicon, concept
// selection, semantic-shift synthesis through a small perceptron psi, fusion
// with real views, and the bound diagnostics.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mvret/dataset.hpp"
#include "mvret/rng.hpp"
#include "mvret/tensor.hpp"

namespace mvret {

enum class SelectionMode { random_e, top_e };

std::string_view to_string(SelectionMode mode);
SelectionMode parse_selection_mode(std::string_view text);

/// One name per line; surrounding whitespace trimmed, blank lines skipped,
/// case-insensitive duplicates dropped (first spelling kept).
std::vector<std::string> load_lexicon(const std::filesystem::path& path);

struct EnrichedLabelSpace {
  std::vector<std::string> seen_names;
  std::vector<std::string> new_names;          // lexicon minus seen, lexicon order
  std::vector<std::size_t> new_lexicon_index;  // position of each new name in the lexicon
  std::size_t E = 40;
  SelectionMode mode = SelectionMode::random_e;
  std::uint64_t selection_seed = 0;
};

/// Throws ErrorKind::config when E is 0 or exceeds the number of new names.
EnrichedLabelSpace enrich_label_space(const std::vector<std::string>& seen_names,
                                      const std::vector<std::string>& lexicon_names, std::size_t E,
                                      SelectionMode mode, std::uint64_t seed);

/// E indices into space.new_names. random_e: seeded sample without
/// replacement (anchor ignored). top_e: the E new names whose text rows are
/// most cosine-similar to the anchor, ties to the lower index; best first.
/// new_text holds one row per new name, [|new_names|, d_c].
std::vector<std::size_t> select_concepts(const EnrichedLabelSpace& space, const Tensor* anchor,
                                         const Tensor& new_text);

// ---------------------------------------------------------------------------

struct VfsParameters {
  ParamBlock w1;  // [d_hidden, d_c]
  ParamBlock b1;  // [d_hidden]
  ParamBlock w2;  // [d, d_hidden]
  ParamBlock b2;  // [d]
  ParamBlock eps;    // [1]
  ParamBlock alpha;  // [1]
  ParamBlock beta;   // [1]

  std::vector<ParamBlock*> params();
  std::vector<const ParamBlock*> params() const;
  std::size_t clip_dim() const { return w1.value.dim(1); }
  std::size_t dino_dim() const { return w2.value.dim(0); }
};

/// psi weights uniform in +-sqrt(6 / fan_in), biases 0; eps = 1, alpha =
/// beta = 0.5. hidden = 0 means hidden = d. Scalars are exempt from decay.
VfsParameters init_vfs_parameters(std::size_t clip_dim, std::size_t dino_dim, Rng& rng,
                                  std::size_t hidden = 0);

/// psi over the last axis: [..., d_c] -> [..., d].
Tensor psi_forward(const VfsParameters& params, const Tensor& x);

struct SynthesisCache {
  Tensor shift;   // LN(unseen - seen), [B, d_c]
  Tensor input;   // clip + eps * shift, [B, M, d_c]
  Tensor hidden;  // pre-activation of the first layer, [B, M, d_hidden]
};

struct SynthesisOutput {
  Tensor values;  // [B, M, d]
  SynthesisCache cache;
};

/// clip_views [B, M, d_c]; seen_text, unseen_text [B, d_c]. Unbatched
/// [M, d_c] / [d_c] inputs are accepted and give [M, d].
SynthesisOutput synthesize_virtual_views(const Tensor& clip_views, const Tensor& seen_text,
                                         const Tensor& unseen_text, const VfsParameters& params);

/// Accumulates gradients of psi and eps.
void synthesis_backward(const Tensor& grad_values, const SynthesisCache& cache,
                        VfsParameters& params);

/// alpha * synth + beta * real.
Tensor fuse_virtual_features(const Tensor& synth, const Tensor& real_views,
                             const VfsParameters& params);

struct FusionGrads {
  Tensor synth;
  Tensor real_views;
};

/// Accumulates gradients of alpha and beta; returns the input gradients.
FusionGrads fuse_backward(const Tensor& grad_fused, const Tensor& synth, const Tensor& real_views,
                          VfsParameters& params);

// ---------------------------------------------------------------------------

struct VirtualViewSet {
  Tensor values;                            // [B, M, d]
  std::vector<std::size_t> concepts;        // index into new_names per sample
  std::vector<std::size_t> pseudo_labels;   // label_offset + concept
  SynthesisOutput synthesis;
  Tensor real_views;
};

struct VirtualBatchInputs {
  const Tensor* real_views = nullptr;  // [B, M, d]
  const Tensor* clip_views = nullptr;  // [B, M, d_c]; null -> unavailable
  std::span<const std::size_t> labels; // label index per sample (= text row)
  const Tensor* text = nullptr;        // full text table
  std::size_t lexicon_offset = 0;      // text row of lexicon entry 0
  std::size_t label_offset = 0;        // added to concept indices for pseudo-labels
};

/// One virtual sample per real sample. `selected` is the E-subset for
/// random_e (indices into new_names); top_e re-selects per sample anchored on
/// the mean clip view. Throws ErrorKind::unavailable without clip features.
VirtualViewSet build_virtual_batch(const VirtualBatchInputs& inputs,
                                   const EnrichedLabelSpace& space,
                                   std::span<const std::size_t> selected,
                                   const VfsParameters& params, Rng& rng);

/// Backprop through fusion and synthesis into the VFS parameters.
void virtual_batch_backward(const Tensor& grad_values, const VirtualViewSet& batch,
                            VfsParameters& params);

/// Text rows ([|new_names|, d_c]) of the new names.
Tensor new_name_text(const EnrichedLabelSpace& space, const Tensor& text, std::size_t lexicon_offset);

// ---------------------------------------------------------------------------

struct BoundOptions {
  std::size_t sample_pairs = 10000;
  std::size_t anchors = 200;
  double slack = 2.0;
  std::size_t expansion_quadruples = 1000;
  std::uint64_t seed = 7;
};

struct BoundReport {
  double lipschitz_estimate = 0.0;  // L-hat
  double sigma_sq = 0.0;            // sigma-hat squared
  std::vector<std::string> unseen_names;
  std::vector<double> deviations;   // per unseen class
  double median_deviation = 0.0;
  double bound = 0.0;               // L-hat * sigma-hat^2
  double violation_rate = 0.0;      // fraction with deviation > slack * bound
  double slack = 2.0;
  double expansion_max_residual = 0.0;
};

/// max |(a-b).(c-d) - ([a.c + b.d] - [a.d + b.c])| over random quadruples.
double expansion_residual(std::size_t quadruples, std::size_t dim, Rng& rng);

/// Needs clip features, text embeddings, a train split and labelled
/// query/target objects; throws ErrorKind::unavailable otherwise.
BoundReport bound_report(const VfsParameters& params, const Dataset& dataset,
                         const BoundOptions& options = {});

}  // namespace mvret
