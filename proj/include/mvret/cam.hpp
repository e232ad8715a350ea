#pragma once

// Chunking and adapting module: stacked conv-BN-ReLU blocks with pooling along
// the view axis, a global-average branch, and lambda-weighted fusion.

#include <cstddef>
#include <vector>

#include "mvret/numerics.hpp"
#include "mvret/rng.hpp"
#include "mvret/tensor.hpp"

namespace mvret {

struct CamConfig {
  std::size_t chunk_size = 3;   // k_w
  std::size_t conv_stride = 0;  // 0 -> chunk_size
  std::size_t pool_kernel = 3;
  PoolMode pool_mode = PoolMode::average;
  std::size_t num_cbr_blocks = 1;
  double lambda = 0.3;
  std::size_t dino_dim = 0;
  bool normalize_descriptor = true;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t stride() const { return conv_stride == 0 ? chunk_size : conv_stride; }
  /// Throws ErrorKind::config.
  void validate() const;
};

struct CbrBlock {
  ParamBlock weight;  // [d, d, k_w]
  ParamBlock bias;    // [d]
  ParamBlock gamma;   // [d]
  ParamBlock beta;    // [d]
  Tensor running_mean;
  Tensor running_var;
};

struct CamParameters {
  std::vector<CbrBlock> blocks;

  std::vector<ParamBlock*> params();
  std::vector<const ParamBlock*> params() const;
};

/// Conv weights and biases uniform in +-1/sqrt(d * k_w); gamma = 1, beta = 0,
/// running mean 0 and variance 1. BN affine terms are exempt from weight decay.
CamParameters init_cam_parameters(const CamConfig& config, Rng& rng);

struct ObjectDescriptor {
  Tensor vector;  // [d]
  bool normalized = false;
  bool zero = false;
};

/// Per-channel mean over the views of one object, views [M, d].
ObjectDescriptor mean_pool_descriptor(const Tensor& views, bool normalize);
/// Batched version: [B, M, d] -> [B, d].
Tensor mean_pool_batch(const Tensor& batch, bool normalize);

/// Number of positions after every block (index 0 = M), following the skip
/// rule: a block whose input has fewer than k_w positions passes it through.
std::vector<std::size_t> cam_position_trace(const CamConfig& config, std::size_t views);

struct CamBlockCache {
  bool applied = false;
  Tensor input;     // [B, d, P]
  Tensor bn_input;  // conv output
  BatchNormCache bn;
  Tensor bn_output;
};

struct CamCache {
  Mode mode = Mode::eval;
  bool recorded = false;
  std::size_t batch = 0;
  std::size_t views = 0;
  std::vector<CamBlockCache> blocks;
  Tensor final_positions;  // [B, d, P_last]
  Tensor fused;            // [B, d] before normalization
};

struct CamOptions {
  /// Train mode only: fold batch statistics into the running statistics.
  bool update_running_stats = true;
  /// Keep intermediates for cam_backward. Always on in train mode.
  bool record = false;
};

struct CamOutput {
  Tensor descriptors;  // [B, d]
  CamCache cache;
};

/// batch [B, M, d]. Train mode uses batch statistics and needs B >= 2.
CamOutput cam_forward(const Tensor& batch, const CamConfig& config, CamParameters& params,
                      Mode mode, const CamOptions& options = {});

/// Accumulates parameter gradients and returns d loss / d batch, [B, M, d].
/// Throws ErrorKind::config when the cache was not recorded (plain eval forward).
Tensor cam_backward(const Tensor& grad_descriptors, const CamCache& cache, const CamConfig& config,
                    CamParameters& params);

/// Eval-mode descriptors for a whole [N, M, d] tensor.
Tensor cam_describe(const Tensor& views, const CamConfig& config, const CamParameters& params);

}  // namespace mvret
