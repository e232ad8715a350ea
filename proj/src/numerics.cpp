#include "mvret/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "mvret/error.hpp"
#include "sequence_view.hpp"

namespace mvret {

using detail::SequenceView;
using detail::sequence_view;

Conv1dGeometry conv1d_geometry(std::size_t length, std::size_t kernel, std::size_t stride) {
  require(kernel >= 1, ErrorKind::shape, "conv1d: kernel must be >= 1");
  require(stride >= 1, ErrorKind::shape, "conv1d: stride must be >= 1");
  require(length >= 1, ErrorKind::shape, "conv1d: input has no positions");
  Conv1dGeometry g;
  g.length = length;
  g.kernel = kernel;
  g.stride = stride;
  g.padded_length = (length + kernel - 1) / kernel * kernel;
  require(kernel <= g.padded_length, ErrorKind::shape, "conv1d: kernel exceeds padded length");
  g.positions = (g.padded_length - kernel) / stride + 1;
  return g;
}

namespace {

struct ConvSetup {
  SequenceView in;
  Conv1dGeometry geom;
  std::size_t out_channels = 0;
  std::size_t taps = 0;  // Cin * k
};

ConvSetup conv_setup(const Tensor& input, const Tensor& weights, std::size_t stride) {
  ConvSetup s;
  s.in = sequence_view(input, "conv1d input");
  require_rank(weights, 3, "conv1d weights");
  require(weights.dim(1) == s.in.channels, ErrorKind::shape,
          "conv1d: weight input channels " + std::to_string(weights.dim(1)) +
              " != input channels " + std::to_string(s.in.channels));
  s.geom = conv1d_geometry(s.in.length, weights.dim(2), stride);
  s.out_channels = weights.dim(0);
  s.taps = s.in.channels * s.geom.kernel;
  return s;
}

// cols[r][c*k + j] = x[b, c, min(i*stride + j, M - 1)] with r = b*K + i
std::vector<double> im2col(const Tensor& input, const ConvSetup& s) {
  const auto& g = s.geom;
  const std::size_t rows = s.in.batch * g.positions;
  std::vector<double> cols(rows * s.taps);
  const double* x = input.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const std::size_t b = static_cast<std::size_t>(r) / g.positions;
    const std::size_t i = static_cast<std::size_t>(r) % g.positions;
    double* col = cols.data() + static_cast<std::size_t>(r) * s.taps;
    for (std::size_t c = 0; c < s.in.channels; ++c) {
      const double* xc = x + (b * s.in.channels + c) * g.length;
      for (std::size_t j = 0; j < g.kernel; ++j)
        col[c * g.kernel + j] = xc[std::min(i * g.stride + j, g.length - 1)];
    }
  }
  return cols;
}

}  // namespace

Tensor conv1d_chunk(const Tensor& input, const Tensor& weights, const Tensor& bias,
                    std::size_t stride) {
  const ConvSetup s = conv_setup(input, weights, stride);
  require_shape(bias, {s.out_channels}, "conv1d bias");
  const auto& g = s.geom;
  const std::size_t cout = s.out_channels;

  std::vector<double> wt(s.taps * cout);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t q = 0; q < s.taps; ++q) wt[q * cout + o] = weights[o * s.taps + q];

  const std::vector<double> cols = im2col(input, s);
  Tensor out = s.in.batched ? Tensor({s.in.batch, cout, g.positions})
                            : Tensor({cout, g.positions});
  double* y = out.data();
  const std::size_t rows = s.in.batch * g.positions;
#pragma omp parallel
  {
    std::vector<double> acc(cout);
#pragma omp for schedule(static)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
      const std::size_t b = static_cast<std::size_t>(r) / g.positions;
      const std::size_t i = static_cast<std::size_t>(r) % g.positions;
      const double* col = cols.data() + static_cast<std::size_t>(r) * s.taps;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t q = 0; q < s.taps; ++q) {
        const double cq = col[q];
        const double* wrow = wt.data() + q * cout;
        for (std::size_t o = 0; o < cout; ++o) acc[o] += wrow[o] * cq;
      }
      for (std::size_t o = 0; o < cout; ++o) y[(b * cout + o) * g.positions + i] = bias[o] + acc[o];
    }
  }
  return out;
}

Conv1dGrads conv1d_chunk_backward(const Tensor& grad_output, const Tensor& input,
                                  const Tensor& weights, std::size_t stride) {
  const ConvSetup s = conv_setup(input, weights, stride);
  const auto& g = s.geom;
  const std::size_t cout = s.out_channels;
  const std::size_t batch = s.in.batch;
  if (s.in.batched)
    require_shape(grad_output, {batch, cout, g.positions}, "conv1d grad_output");
  else
    require_shape(grad_output, {cout, g.positions}, "conv1d grad_output");

  const std::vector<double> cols = im2col(input, s);
  const double* gy = grad_output.data();
  const double* w = weights.data();

  Conv1dGrads grads{Tensor(input.shape()), Tensor(weights.shape()), Tensor({cout})};
  double* gw = grads.weights.data();
  double* gb = grads.bias.data();
  double* gx = grads.input.data();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t oi = 0; oi < static_cast<std::ptrdiff_t>(cout); ++oi) {
    const std::size_t o = static_cast<std::size_t>(oi);
    double* gw_row = gw + o * s.taps;
    double bias_acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < g.positions; ++i) {
        const double go = gy[(b * cout + o) * g.positions + i];
        bias_acc += go;
        const double* col = cols.data() + (b * g.positions + i) * s.taps;
        for (std::size_t q = 0; q < s.taps; ++q) gw_row[q] += go * col[q];
      }
    gb[o] = bias_acc;
  }

#pragma omp parallel
  {
    std::vector<double> gcol(s.taps);
#pragma omp for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
      const std::size_t b = static_cast<std::size_t>(bi);
      for (std::size_t i = 0; i < g.positions; ++i) {
        std::fill(gcol.begin(), gcol.end(), 0.0);
        for (std::size_t o = 0; o < cout; ++o) {
          const double go = gy[(b * cout + o) * g.positions + i];
          const double* wrow = w + o * s.taps;
          for (std::size_t q = 0; q < s.taps; ++q) gcol[q] += go * wrow[q];
        }
        for (std::size_t c = 0; c < s.in.channels; ++c) {
          double* gxc = gx + (b * s.in.channels + c) * g.length;
          for (std::size_t j = 0; j < g.kernel; ++j)
            gxc[std::min(i * g.stride + j, g.length - 1)] += gcol[c * g.kernel + j];
        }
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------

BatchNormResult batchnorm1d_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                                    const Tensor& running_mean, const Tensor& running_var,
                                    Mode mode, double eps) {
  const SequenceView v = sequence_view(input, "batchnorm input");
  const std::size_t C = v.channels, K = v.length, B = v.batch;
  require_shape(gamma, {C}, "batchnorm gamma");
  require_shape(beta, {C}, "batchnorm beta");
  require_shape(running_mean, {C}, "batchnorm running_mean");
  require_shape(running_var, {C}, "batchnorm running_var");
  const std::size_t n = B * K;
  if (mode == Mode::train)
    require(n >= 2, ErrorKind::numeric,
            "batchnorm: degenerate batch, train mode needs batch*positions >= 2, got " +
                std::to_string(n));

  BatchNormResult r{Tensor(input.shape()), {}};
  auto& cache = r.cache;
  cache.mode = mode;
  cache.count = n;
  cache.normalized = Tensor(input.shape());
  cache.inv_std.assign(C, 0.0);
  if (mode == Mode::train) {
    cache.batch_mean.assign(C, 0.0);
    cache.batch_var.assign(C, 0.0);
  }
  const double* x = input.data();
  double* xh = cache.normalized.data();
  double* y = r.output.data();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(C); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    double mean, inv_std;
    if (mode == Mode::train) {
      double sum = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) sum += x[(b * C + c) * K + k];
      mean = sum / static_cast<double>(n);
      double sq = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
          const double d = x[(b * C + c) * K + k] - mean;
          sq += d * d;
        }
      const double var = sq / static_cast<double>(n);
      cache.batch_mean[c] = mean;
      cache.batch_var[c] = var;
      inv_std = 1.0 / std::sqrt(var + eps);
    } else {
      mean = running_mean[c];
      inv_std = 1.0 / std::sqrt(running_var[c] + eps);
    }
    cache.inv_std[c] = inv_std;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = (b * C + c) * K + k;
        xh[idx] = (x[idx] - mean) * inv_std;
        y[idx] = gamma[c] * xh[idx] + beta[c];
      }
  }
  return r;
}

void batchnorm1d_update_running(Tensor& running_mean, Tensor& running_var,
                                const BatchNormCache& cache, double momentum) {
  require(cache.mode == Mode::train, ErrorKind::config,
          "batchnorm: running statistics update needs a train-mode cache");
  const std::size_t C = cache.batch_mean.size();
  require_shape(running_mean, {C}, "batchnorm running_mean");
  require_shape(running_var, {C}, "batchnorm running_var");
  const double n = static_cast<double>(cache.count);
  const double unbias = n / (n - 1.0);
  for (std::size_t c = 0; c < C; ++c) {
    running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * cache.batch_mean[c];
    running_var[c] = (1.0 - momentum) * running_var[c] + momentum * cache.batch_var[c] * unbias;
  }
}

Tensor batchnorm1d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, Mode mode, double momentum,
                   double eps) {
  auto r = batchnorm1d_forward(input, gamma, beta, running_mean, running_var, mode, eps);
  if (mode == Mode::train) batchnorm1d_update_running(running_mean, running_var, r.cache, momentum);
  return std::move(r.output);
}

BatchNormGrads batchnorm1d_backward(const Tensor& grad_output, const BatchNormCache& cache,
                                    const Tensor& gamma) {
  require_shape(grad_output, cache.normalized.shape(), "batchnorm grad_output");
  const SequenceView v = sequence_view(grad_output, "batchnorm grad_output");
  const std::size_t C = v.channels, K = v.length, B = v.batch;
  require_shape(gamma, {C}, "batchnorm gamma");
  BatchNormGrads grads{Tensor(grad_output.shape()), Tensor({C}), Tensor({C})};
  const double* gy = grad_output.data();
  const double* xh = cache.normalized.data();
  double* gx = grads.input.data();
  const double n = static_cast<double>(cache.count);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(C); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = (b * C + c) * K + k;
        sum_dy += gy[idx];
        sum_dy_xh += gy[idx] * xh[idx];
      }
    grads.gamma[c] = sum_dy_xh;
    grads.beta[c] = sum_dy;
    const double scale = gamma[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = (b * C + c) * K + k;
        if (cache.mode == Mode::train)
          gx[idx] = scale * (gy[idx] - sum_dy / n - xh[idx] * (sum_dy_xh / n));
        else
          gx[idx] = scale * gy[idx];
      }
  }
  return grads;
}

// ---------------------------------------------------------------------------

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  const std::size_t n = input.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& grad_output, const Tensor& input) {
  require_shape(grad_output, input.shape(), "relu grad_output");
  Tensor out(input.shape());
  const std::size_t n = input.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = input[i] > 0.0 ? grad_output[i] : 0.0;
  return out;
}

std::size_t pool1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride) {
  require(kernel >= 1, ErrorKind::shape, "pool1d: kernel must be >= 1");
  if (stride == 0) stride = kernel;
  if (length <= kernel) return 1;
  return (length - kernel + stride - 1) / stride + 1;
}

Tensor pool1d(const Tensor& input, std::size_t kernel, PoolMode mode, std::size_t stride) {
  const SequenceView v = sequence_view(input, "pool1d input");
  if (stride == 0) stride = kernel;
  const std::size_t K = v.length;
  const std::size_t out_len = pool1d_output_length(K, kernel, stride);
  const std::size_t rows = v.batch * v.channels;
  Tensor out = v.batched ? Tensor({v.batch, v.channels, out_len}) : Tensor({v.channels, out_len});
  const double* x = input.data();
  double* y = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t w = 0; w < out_len; ++w) {
      const std::size_t lo = w * stride, hi = std::min(lo + kernel, K);
      if (mode == PoolMode::average) {
        double sum = 0.0;
        for (std::size_t k = lo; k < hi; ++k) sum += x[r * K + k];
        y[r * out_len + w] = sum / static_cast<double>(hi - lo);
      } else {
        double best = x[r * K + lo];
        for (std::size_t k = lo + 1; k < hi; ++k) best = std::max(best, x[r * K + k]);
        y[r * out_len + w] = best;
      }
    }
  return out;
}

Tensor pool1d_backward(const Tensor& grad_output, const Tensor& input, std::size_t kernel,
                       PoolMode mode, std::size_t stride) {
  const SequenceView v = sequence_view(input, "pool1d input");
  if (stride == 0) stride = kernel;
  const std::size_t K = v.length;
  const std::size_t out_len = pool1d_output_length(K, kernel, stride);
  const std::size_t rows = v.batch * v.channels;
  require(grad_output.size() == rows * out_len, ErrorKind::shape, "pool1d grad_output size");
  Tensor gx(input.shape());
  const double* x = input.data();
  const double* gy = grad_output.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t w = 0; w < out_len; ++w) {
      const std::size_t lo = w * stride, hi = std::min(lo + kernel, K);
      const double g = gy[r * out_len + w];
      if (mode == PoolMode::average) {
        const double share = g / static_cast<double>(hi - lo);
        for (std::size_t k = lo; k < hi; ++k) gx[r * K + k] += share;
      } else {
        std::size_t arg = lo;
        for (std::size_t k = lo + 1; k < hi; ++k)
          if (x[r * K + k] > x[r * K + arg]) arg = k;
        gx[r * K + arg] += g;
      }
    }
  return gx;
}

// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& input, double eps) {
  require(input.rank() >= 1 && input.size() > 0, ErrorKind::shape, "layer_norm: empty input");
  const std::size_t n = input.shape().back();
  const std::size_t rows = input.size() / n;
  Tensor out(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = input.data() + r * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (x[i] - mean) * inv_std;
  }
  return out;
}

Tensor layer_norm_backward(const Tensor& grad_output, const Tensor& input, double eps) {
  require_shape(grad_output, input.shape(), "layer_norm grad_output");
  const std::size_t n = input.shape().back();
  const std::size_t rows = input.size() / n;
  const Tensor xhat = layer_norm(input, eps);
  Tensor gx(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = input.data() + r * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mean_g += grad_output[r * n + i];
      mean_gx += grad_output[r * n + i] * xhat[r * n + i];
    }
    mean_g /= static_cast<double>(n);
    mean_gx /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      gx[r * n + i] = inv_std * (grad_output[r * n + i] - mean_g - xhat[r * n + i] * mean_gx);
  }
  return gx;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t linear_rows(const Tensor& input, const Tensor& weights) {
  require_rank(weights, 2, "linear weights");
  require(input.rank() >= 1 && input.shape().back() == weights.dim(1), ErrorKind::shape,
          "linear: input last axis " + shape_to_string(input.shape()) + " != weights d_in " +
              std::to_string(weights.dim(1)));
  return input.size() / weights.dim(1);
}

Shape replace_last(Shape shape, std::size_t extent) {
  shape.back() = extent;
  return shape;
}

}  // namespace

Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  const std::size_t rows = linear_rows(input, weights);
  const std::size_t dout = weights.dim(0), din = weights.dim(1);
  require_shape(bias, {dout}, "linear bias");
  std::vector<double> wt(din * dout);
  for (std::size_t o = 0; o < dout; ++o)
    for (std::size_t q = 0; q < din; ++q) wt[q * dout + o] = weights[o * din + q];
  Tensor out(replace_last(input.shape(), dout));
  const double* x = input.data();
  double* y = out.data();
#pragma omp parallel
  {
    std::vector<double> acc(dout);
#pragma omp for schedule(static)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
      const std::size_t r = static_cast<std::size_t>(ri);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t q = 0; q < din; ++q) {
        const double xq = x[r * din + q];
        const double* wrow = wt.data() + q * dout;
        for (std::size_t o = 0; o < dout; ++o) acc[o] += wrow[o] * xq;
      }
      for (std::size_t o = 0; o < dout; ++o) y[r * dout + o] = bias[o] + acc[o];
    }
  }
  return out;
}

LinearGrads linear_backward(const Tensor& grad_output, const Tensor& input, const Tensor& weights) {
  const std::size_t rows = linear_rows(input, weights);
  const std::size_t dout = weights.dim(0), din = weights.dim(1);
  require_shape(grad_output, replace_last(input.shape(), dout), "linear grad_output");
  LinearGrads grads{Tensor(input.shape()), Tensor(weights.shape()), Tensor({dout})};
  const double* x = input.data();
  const double* gy = grad_output.data();
  const double* w = weights.data();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t oi = 0; oi < static_cast<std::ptrdiff_t>(dout); ++oi) {
    const std::size_t o = static_cast<std::size_t>(oi);
    double* gw_row = grads.weights.data() + o * din;
    double bias_acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double go = gy[r * dout + o];
      bias_acc += go;
      const double* xr = x + r * din;
      for (std::size_t q = 0; q < din; ++q) gw_row[q] += go * xr[q];
    }
    grads.bias[o] = bias_acc;
  }

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
    const std::size_t r = static_cast<std::size_t>(ri);
    double* gx = grads.input.data() + r * din;
    for (std::size_t o = 0; o < dout; ++o) {
      const double go = gy[r * dout + o];
      const double* wrow = w + o * din;
      for (std::size_t q = 0; q < din; ++q) gx[q] += go * wrow[q];
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------

Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "cosine lhs");
  require_rank(b, 2, "cosine rhs");
  require(a.dim(1) == b.dim(1), ErrorKind::shape, "cosine: dimension mismatch");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  std::vector<double> na(n), nb(m);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * a[i * d + k];
    na[i] = s;
  }
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += b[j * d + k] * b[j * d + k];
    nb[j] = s;
  }
  Tensor out({n, m});
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const double* ai = a.data() + i * d;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b.data() + j * d;
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += ai[k] * bj[k];
      out[i * m + j] = dot / std::max(std::sqrt(na[i] * nb[j]), 1e-12);
    }
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& input, std::vector<bool>* zero_rows) {
  require_rank(input, 2, "l2_normalize input");
  const std::size_t rows = input.dim(0), d = input.dim(1);
  Tensor out(input.shape());
  if (zero_rows) zero_rows->assign(rows, false);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += input[r * d + k] * input[r * d + k];
    const double norm = std::sqrt(s);
    if (norm == 0.0) {
      if (zero_rows) (*zero_rows)[r] = true;
      continue;
    }
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = input[r * d + k] / norm;
  }
  return out;
}

Tensor l2_normalize_rows_backward(const Tensor& grad_output, const Tensor& input) {
  require_shape(grad_output, input.shape(), "l2_normalize grad_output");
  const std::size_t rows = input.dim(0), d = input.dim(1);
  Tensor gx(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += input[r * d + k] * input[r * d + k];
    const double norm = std::sqrt(s);
    if (norm == 0.0) continue;
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += grad_output[r * d + k] * input[r * d + k] / norm;
    for (std::size_t k = 0; k < d; ++k)
      gx[r * d + k] = (grad_output[r * d + k] - input[r * d + k] / norm * dot) / norm;
  }
  return gx;
}

}  // namespace mvret
