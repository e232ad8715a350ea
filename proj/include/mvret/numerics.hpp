#pragma once

// Dense kernels with hand-derived gradients.
//
// Layout conventions: sequence tensors are [B, C, L] (batch, channel,
// position). Every kernel parallelizes over outputs that a single thread
// owns and accumulates in a fixed order, so results are bitwise identical
// for any OpenMP thread count. The serial versions in mvret::reference
// follow the textbook loop order and are kept for tests and benchmarks.

#include <cstddef>
#include <vector>

#include "mvret/tensor.hpp"

namespace mvret {

enum class Mode { train, eval };
enum class PoolMode { average, max };

// ---------------------------------------------------------------------------
// 1D convolution over the view axis with replicate-last padding.

struct Conv1dGeometry {
  std::size_t length = 0;         // M, real positions
  std::size_t padded_length = 0;  // M rounded up to a multiple of the kernel
  std::size_t kernel = 0;
  std::size_t stride = 0;
  std::size_t positions = 0;      // K, output positions
};

/// Throws ErrorKind::shape when the kernel does not fit the padded input.
Conv1dGeometry conv1d_geometry(std::size_t length, std::size_t kernel, std::size_t stride);

/// input [B, Cin, M] (or [Cin, M]), weights [Cout, Cin, k], bias [Cout]
/// -> [B, Cout, K] (or [Cout, K]).
Tensor conv1d_chunk(const Tensor& input, const Tensor& weights, const Tensor& bias,
                    std::size_t stride);

struct Conv1dGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

Conv1dGrads conv1d_chunk_backward(const Tensor& grad_output, const Tensor& input,
                                  const Tensor& weights, std::size_t stride);

// ---------------------------------------------------------------------------
// Batch normalization over [B, C, K], statistics per channel over B*K.

struct BatchNormCache {
  Mode mode = Mode::eval;
  std::size_t count = 0;           // B*K
  Tensor normalized;               // x_hat
  std::vector<double> batch_mean;  // train mode only
  std::vector<double> batch_var;   // biased, train mode only
  std::vector<double> inv_std;
};

struct BatchNormResult {
  Tensor output;
  BatchNormCache cache;
};

/// Pure forward: running statistics are read (eval) but never written.
/// Train mode needs B*K >= 2.
BatchNormResult batchnorm1d_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                                    const Tensor& running_mean, const Tensor& running_var,
                                    Mode mode, double eps = 1e-5);

/// running = (1 - momentum) * running + momentum * batch; the variance update
/// uses the unbiased batch variance.
void batchnorm1d_update_running(Tensor& running_mean, Tensor& running_var,
                                const BatchNormCache& cache, double momentum = 0.1);

/// Forward plus running-statistic update in train mode.
Tensor batchnorm1d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, Mode mode,
                   double momentum = 0.1, double eps = 1e-5);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

BatchNormGrads batchnorm1d_backward(const Tensor& grad_output, const BatchNormCache& cache,
                                    const Tensor& gamma);

// ---------------------------------------------------------------------------

Tensor relu(const Tensor& input);
/// Subgradient 0 at the kink.
Tensor relu_backward(const Tensor& grad_output, const Tensor& input);

/// Pooling along the last axis of [B, C, K] or [C, K]. A trailing partial
/// window is averaged over its actual extent. stride = 0 means stride = kernel.
Tensor pool1d(const Tensor& input, std::size_t kernel, PoolMode mode = PoolMode::average,
              std::size_t stride = 0);
Tensor pool1d_backward(const Tensor& grad_output, const Tensor& input, std::size_t kernel,
                       PoolMode mode = PoolMode::average, std::size_t stride = 0);
std::size_t pool1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride);

/// Row-wise (x - mean) / sqrt(var + eps) over the last axis, biased variance,
/// no affine.
Tensor layer_norm(const Tensor& input, double eps = 1e-5);
Tensor layer_norm_backward(const Tensor& grad_output, const Tensor& input, double eps = 1e-5);

/// Affine map over the last axis: input [..., d_in], weights [d_out, d_in].
Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias);

struct LinearGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

LinearGrads linear_backward(const Tensor& grad_output, const Tensor& input, const Tensor& weights);

/// S[i, j] = <a_i, b_j> / max(|a_i| |b_j|, 1e-12).
Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b);

/// Row-wise L2 normalization of [R, d]. Zero rows stay zero and are flagged.
Tensor l2_normalize_rows(const Tensor& input, std::vector<bool>* zero_rows = nullptr);
Tensor l2_normalize_rows_backward(const Tensor& grad_output, const Tensor& input);

// ---------------------------------------------------------------------------

namespace reference {

Tensor conv1d_chunk(const Tensor& input, const Tensor& weights, const Tensor& bias,
                    std::size_t stride);
Conv1dGrads conv1d_chunk_backward(const Tensor& grad_output, const Tensor& input,
                                  const Tensor& weights, std::size_t stride);
BatchNormResult batchnorm1d_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                                    const Tensor& running_mean, const Tensor& running_var,
                                    Mode mode, double eps = 1e-5);
BatchNormGrads batchnorm1d_backward(const Tensor& grad_output, const BatchNormCache& cache,
                                    const Tensor& gamma);
Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias);
LinearGrads linear_backward(const Tensor& grad_output, const Tensor& input, const Tensor& weights);
Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b);

}  // namespace reference

}  // namespace mvret
