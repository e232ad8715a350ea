// Straightforward serial loops. Accumulation order matches the parallel
// kernels so the two agree bitwise.

#include <algorithm>
#include <cmath>

#include "mvret/error.hpp"
#include "mvret/numerics.hpp"
#include "sequence_view.hpp"

namespace mvret::reference {

using detail::sequence_view;

Tensor conv1d_chunk(const Tensor& input, const Tensor& weights, const Tensor& bias,
                    std::size_t stride) {
  const auto v = sequence_view(input, "conv1d input");
  require_rank(weights, 3, "conv1d weights");
  require(weights.dim(1) == v.channels, ErrorKind::shape, "conv1d: channel mismatch");
  const std::size_t cout = weights.dim(0), cin = v.channels, k = weights.dim(2);
  require_shape(bias, {cout}, "conv1d bias");
  const auto g = conv1d_geometry(v.length, k, stride);
  const std::size_t M = g.length, K = g.positions;
  Tensor out = v.batched ? Tensor({v.batch, cout, K}) : Tensor({cout, K});
  for (std::size_t b = 0; b < v.batch; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < K; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j)
            acc += weights[(o * cin + c) * k + j] *
                   input[(b * cin + c) * M + std::min(i * stride + j, M - 1)];
        out[(b * cout + o) * K + i] = bias[o] + acc;
      }
  return out;
}

Conv1dGrads conv1d_chunk_backward(const Tensor& grad_output, const Tensor& input,
                                  const Tensor& weights, std::size_t stride) {
  const auto v = sequence_view(input, "conv1d input");
  require_rank(weights, 3, "conv1d weights");
  require(weights.dim(1) == v.channels, ErrorKind::shape, "conv1d: channel mismatch");
  const std::size_t cout = weights.dim(0), cin = v.channels, k = weights.dim(2);
  const auto g = conv1d_geometry(v.length, k, stride);
  const std::size_t M = g.length, K = g.positions, B = v.batch;
  require(grad_output.size() == B * cout * K, ErrorKind::shape, "conv1d grad_output size");
  const auto gy = [&](std::size_t b, std::size_t o, std::size_t i) {
    return grad_output[(b * cout + o) * K + i];
  };
  const auto x = [&](std::size_t b, std::size_t c, std::size_t p) {
    return input[(b * cin + c) * M + std::min(p, M - 1)];
  };

  Conv1dGrads grads{Tensor(input.shape()), Tensor(weights.shape()), Tensor({cout})};
  for (std::size_t o = 0; o < cout; ++o) {
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < K; ++i) acc += gy(b, o, i);
    grads.bias[o] = acc;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t j = 0; j < k; ++j) {
        double w = 0.0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < K; ++i) w += gy(b, o, i) * x(b, c, i * stride + j);
        grads.weights[(o * cin + c) * k + j] = w;
      }
  }
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t j = 0; j < k; ++j) {
          double acc = 0.0;
          for (std::size_t o = 0; o < cout; ++o) acc += gy(b, o, i) * weights[(o * cin + c) * k + j];
          grads.input[(b * cin + c) * M + std::min(i * stride + j, M - 1)] += acc;
        }
  return grads;
}

BatchNormResult batchnorm1d_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                                    const Tensor& running_mean, const Tensor& running_var,
                                    Mode mode, double eps) {
  const auto v = sequence_view(input, "batchnorm input");
  const std::size_t B = v.batch, C = v.channels, K = v.length, n = B * K;
  if (mode == Mode::train)
    require(n >= 2, ErrorKind::numeric, "batchnorm: degenerate batch");
  BatchNormResult r{Tensor(input.shape()), {}};
  r.cache.mode = mode;
  r.cache.count = n;
  r.cache.normalized = Tensor(input.shape());
  r.cache.inv_std.assign(C, 0.0);
  if (mode == Mode::train) {
    r.cache.batch_mean.assign(C, 0.0);
    r.cache.batch_var.assign(C, 0.0);
  }
  for (std::size_t c = 0; c < C; ++c) {
    double mean = running_mean[c], var = running_var[c];
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) s += input[(b * C + c) * K + k];
      mean = s / static_cast<double>(n);
      double sq = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
          const double d = input[(b * C + c) * K + k] - mean;
          sq += d * d;
        }
      var = sq / static_cast<double>(n);
      r.cache.batch_mean[c] = mean;
      r.cache.batch_var[c] = var;
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    r.cache.inv_std[c] = inv_std;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = (b * C + c) * K + k;
        r.cache.normalized[idx] = (input[idx] - mean) * inv_std;
        r.output[idx] = gamma[c] * r.cache.normalized[idx] + beta[c];
      }
  }
  return r;
}

BatchNormGrads batchnorm1d_backward(const Tensor& grad_output, const BatchNormCache& cache,
                                    const Tensor& gamma) {
  const auto v = sequence_view(grad_output, "batchnorm grad_output");
  const std::size_t B = v.batch, C = v.channels, K = v.length;
  const double n = static_cast<double>(cache.count);
  BatchNormGrads grads{Tensor(grad_output.shape()), Tensor({C}), Tensor({C})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = (b * C + c) * K + k;
        sum_dy += grad_output[idx];
        sum_dy_xh += grad_output[idx] * cache.normalized[idx];
      }
    grads.gamma[c] = sum_dy_xh;
    grads.beta[c] = sum_dy;
    const double scale = gamma[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = (b * C + c) * K + k;
        grads.input[idx] =
            cache.mode == Mode::train
                ? scale * (grad_output[idx] - sum_dy / n - cache.normalized[idx] * (sum_dy_xh / n))
                : scale * grad_output[idx];
      }
  }
  return grads;
}

Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  require_rank(weights, 2, "linear weights");
  const std::size_t dout = weights.dim(0), din = weights.dim(1);
  require(input.rank() >= 1 && input.shape().back() == din, ErrorKind::shape,
          "linear: input dimension mismatch");
  const std::size_t rows = input.size() / din;
  Shape shape = input.shape();
  shape.back() = dout;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = 0.0;
      for (std::size_t q = 0; q < din; ++q) acc += weights[o * din + q] * input[r * din + q];
      out[r * dout + o] = bias[o] + acc;
    }
  return out;
}

LinearGrads linear_backward(const Tensor& grad_output, const Tensor& input, const Tensor& weights) {
  require_rank(weights, 2, "linear weights");
  const std::size_t dout = weights.dim(0), din = weights.dim(1);
  const std::size_t rows = input.size() / din;
  require(grad_output.size() == rows * dout, ErrorKind::shape, "linear grad_output size");
  LinearGrads grads{Tensor(input.shape()), Tensor(weights.shape()), Tensor({dout})};
  for (std::size_t o = 0; o < dout; ++o) {
    double b = 0.0;
    for (std::size_t r = 0; r < rows; ++r) b += grad_output[r * dout + o];
    grads.bias[o] = b;
    for (std::size_t q = 0; q < din; ++q) {
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += grad_output[r * dout + o] * input[r * din + q];
      grads.weights[o * din + q] = acc;
    }
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < din; ++q) {
      double acc = 0.0;
      for (std::size_t o = 0; o < dout; ++o) acc += grad_output[r * dout + o] * weights[o * din + q];
      grads.input[r * din + q] = acc;
    }
  return grads;
}

Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "cosine lhs");
  require_rank(b, 2, "cosine rhs");
  require(a.dim(1) == b.dim(1), ErrorKind::shape, "cosine: dimension mismatch");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += a[i * d + k] * b[j * d + k];
        na += a[i * d + k] * a[i * d + k];
        nb += b[j * d + k] * b[j * d + k];
      }
      out[i * m + j] = dot / std::max(std::sqrt(na * nb), 1e-12);
    }
  return out;
}

}  // namespace mvret::reference
