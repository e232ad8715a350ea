#include "mvret/cam.hpp"

#include <cmath>
#include <string>

#include "mvret/error.hpp"

namespace mvret {

void CamConfig::validate() const {
  require(chunk_size >= 1, ErrorKind::config, "cam: chunk_size must be >= 1");
  require(pool_kernel >= 1, ErrorKind::config, "cam: pool_kernel must be >= 1");
  require(num_cbr_blocks == 1 || num_cbr_blocks == 2, ErrorKind::config,
          "cam: num_cbr_blocks must be 1 or 2");
  require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::config, "cam: lambda must lie in [0, 1]");
  require(dino_dim >= 1, ErrorKind::config, "cam: dino_dim must be >= 1");
}

std::vector<ParamBlock*> CamParameters::params() {
  std::vector<ParamBlock*> out;
  for (auto& b : blocks)
    for (ParamBlock* p : {&b.weight, &b.bias, &b.gamma, &b.beta}) out.push_back(p);
  return out;
}

std::vector<const ParamBlock*> CamParameters::params() const {
  std::vector<const ParamBlock*> out;
  for (const auto& b : blocks)
    for (const ParamBlock* p : {&b.weight, &b.bias, &b.gamma, &b.beta}) out.push_back(p);
  return out;
}

CamParameters init_cam_parameters(const CamConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.dino_dim, k = config.chunk_size;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d * k));
  CamParameters params;
  for (std::size_t i = 0; i < config.num_cbr_blocks; ++i) {
    const std::string prefix = "cam.block" + std::to_string(i) + ".";
    Tensor w({d, d, k}), b({d});
    for (auto& v : w.storage()) v = rng.uniform(-bound, bound);
    for (auto& v : b.storage()) v = rng.uniform(-bound, bound);
    params.blocks.push_back(CbrBlock{
        ParamBlock(prefix + "conv.weight", std::move(w), LearningGroup::adapter),
        ParamBlock(prefix + "conv.bias", std::move(b), LearningGroup::adapter),
        ParamBlock(prefix + "bn.gamma", Tensor({d}, 1.0), LearningGroup::adapter, false),
        ParamBlock(prefix + "bn.beta", Tensor({d}), LearningGroup::adapter, false),
        Tensor({d}),
        Tensor({d}, 1.0),
    });
  }
  return params;
}

// ---------------------------------------------------------------------------

namespace {

// [B, M, d] -> [B, d], summing views in order.
Tensor view_mean(const Tensor& batch) {
  const std::size_t B = batch.dim(0), M = batch.dim(1), d = batch.dim(2);
  Tensor out({B, d});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t c = 0; c < d; ++c) out[b * d + c] += batch[(b * M + m) * d + c];
    for (std::size_t c = 0; c < d; ++c) out[b * d + c] /= static_cast<double>(M);
  }
  return out;
}

// [B, X, Y] -> [B, Y, X]
Tensor swap_last_axes(const Tensor& t) {
  const std::size_t B = t.dim(0), X = t.dim(1), Y = t.dim(2);
  Tensor out({B, Y, X});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t x = 0; x < X; ++x)
      for (std::size_t y = 0; y < Y; ++y) out[(b * Y + y) * X + x] = t[(b * X + x) * Y + y];
  return out;
}

CamOutput forward_impl(const Tensor& batch, const CamConfig& config, const CamParameters& params,
                       Mode mode, bool record, CamParameters* running_update) {
  config.validate();
  require_rank(batch, 3, "cam input");
  require(batch.dim(2) == config.dino_dim, ErrorKind::shape,
          "cam: input dim " + std::to_string(batch.dim(2)) + " != dino_dim " +
              std::to_string(config.dino_dim));
  require(batch.dim(1) >= 1, ErrorKind::shape, "cam: needs at least one view");
  require(params.blocks.size() == config.num_cbr_blocks, ErrorKind::config,
          "cam: parameter block count does not match config");
  const std::size_t B = batch.dim(0), d = config.dino_dim;
  if (mode == Mode::train)
    require(B >= 2, ErrorKind::numeric, "cam: train mode needs a batch of at least 2");

  CamOutput out;
  CamCache& cache = out.cache;
  cache.mode = mode;
  cache.recorded = record || mode == Mode::train;
  cache.batch = B;
  cache.views = batch.dim(1);

  const Tensor gap = view_mean(batch);
  Tensor h = swap_last_axes(batch);  // [B, d, M]
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const CbrBlock& blk = params.blocks[i];
    CamBlockCache bc;
    if (h.dim(2) < config.chunk_size) {
      if (cache.recorded) cache.blocks.push_back(std::move(bc));
      continue;
    }
    bc.applied = true;
    Tensor conv = conv1d_chunk(h, blk.weight.value, blk.bias.value, config.stride());
    auto bn = batchnorm1d_forward(conv, blk.gamma.value, blk.beta.value, blk.running_mean,
                                  blk.running_var, mode, config.bn_eps);
    if (mode == Mode::train && running_update) {
      CbrBlock& target = running_update->blocks[i];
      batchnorm1d_update_running(target.running_mean, target.running_var, bn.cache,
                                 config.bn_momentum);
    }
    Tensor next = pool1d(relu(bn.output), config.pool_kernel, config.pool_mode);
    if (cache.recorded) {
      bc.input = std::move(h);
      bc.bn_input = std::move(conv);
      bc.bn = std::move(bn.cache);
      bc.bn_output = std::move(bn.output);
      cache.blocks.push_back(std::move(bc));
    }
    h = std::move(next);
  }

  const std::size_t P = h.dim(2);
  Tensor fused({B, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < P; ++p) s += h[(b * d + c) * P + p];
      const double adapted = s / static_cast<double>(P);
      fused[b * d + c] = config.lambda * gap[b * d + c] + (1.0 - config.lambda) * adapted;
    }
  out.descriptors = config.normalize_descriptor ? l2_normalize_rows(fused) : fused;
  if (cache.recorded) {
    cache.final_positions = std::move(h);
    cache.fused = std::move(fused);
  }
  return out;
}

}  // namespace

ObjectDescriptor mean_pool_descriptor(const Tensor& views, bool normalize) {
  require_rank(views, 2, "mean_pool_descriptor views");
  require(views.dim(0) >= 1, ErrorKind::shape, "mean_pool_descriptor: needs at least one view");
  const Tensor row = mean_pool_batch(views.reshaped({1, views.dim(0), views.dim(1)}), normalize);
  ObjectDescriptor out;
  out.vector = row.reshaped({views.dim(1)});
  out.normalized = normalize;
  double n = 0.0;
  for (double v : out.vector.storage()) n += v * v;
  out.zero = n == 0.0;
  return out;
}

Tensor mean_pool_batch(const Tensor& batch, bool normalize) {
  require_rank(batch, 3, "mean_pool_batch input");
  Tensor gap = view_mean(batch);
  return normalize ? l2_normalize_rows(gap) : gap;
}

std::vector<std::size_t> cam_position_trace(const CamConfig& config, std::size_t views) {
  std::vector<std::size_t> trace{views};
  std::size_t P = views;
  for (std::size_t i = 0; i < config.num_cbr_blocks; ++i) {
    if (P >= config.chunk_size) {
      P = conv1d_geometry(P, config.chunk_size, config.stride()).positions;
      trace.push_back(P);
      P = pool1d_output_length(P, config.pool_kernel, config.pool_kernel);
    }
    trace.push_back(P);
  }
  return trace;
}

CamOutput cam_forward(const Tensor& batch, const CamConfig& config, CamParameters& params,
                      Mode mode, const CamOptions& options) {
  return forward_impl(batch, config, params, mode, options.record,
                      options.update_running_stats ? &params : nullptr);
}

Tensor cam_describe(const Tensor& views, const CamConfig& config, const CamParameters& params) {
  return forward_impl(views, config, params, Mode::eval, false, nullptr).descriptors;
}

Tensor cam_backward(const Tensor& grad_descriptors, const CamCache& cache, const CamConfig& config,
                    CamParameters& params) {
  require(cache.recorded, ErrorKind::config,
          "cam_backward: the forward pass did not record intermediates (eval-mode cache)");
  const std::size_t B = cache.batch, M = cache.views, d = config.dino_dim;
  require_shape(grad_descriptors, {B, d}, "cam_backward grad");
  require(cache.blocks.size() == params.blocks.size(), ErrorKind::config,
          "cam_backward: cache does not match parameters");

  const Tensor d_fused = config.normalize_descriptor
                             ? l2_normalize_rows_backward(grad_descriptors, cache.fused)
                             : grad_descriptors;
  const std::size_t P = cache.final_positions.dim(2);
  Tensor dh(cache.final_positions.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < d; ++c) {
      const double g = (1.0 - config.lambda) * d_fused[b * d + c] / static_cast<double>(P);
      for (std::size_t p = 0; p < P; ++p) dh[(b * d + c) * P + p] = g;
    }

  for (std::size_t i = params.blocks.size(); i-- > 0;) {
    const CamBlockCache& bc = cache.blocks[i];
    if (!bc.applied) continue;
    CbrBlock& blk = params.blocks[i];
    Tensor g = pool1d_backward(dh, relu(bc.bn_output), config.pool_kernel, config.pool_mode);
    g = relu_backward(g, bc.bn_output);
    auto bn = batchnorm1d_backward(g, bc.bn, blk.gamma.value);
    accumulate(blk.gamma.grad, bn.gamma);
    accumulate(blk.beta.grad, bn.beta);
    auto conv = conv1d_chunk_backward(bn.input, bc.input, blk.weight.value, config.stride());
    accumulate(blk.weight.grad, conv.weights);
    accumulate(blk.bias.grad, conv.bias);
    dh = std::move(conv.input);
  }

  // dh is [B, d, M] now; add the global-average branch.
  Tensor grad_input({B, M, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t c = 0; c < d; ++c)
        grad_input[(b * M + m) * d + c] =
            dh[(b * d + c) * M + m] + config.lambda * d_fused[b * d + c] / static_cast<double>(M);
  return grad_input;
}

}  // namespace mvret
