#include "mvret/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"
#include "mvret/error.hpp"
#include "mvret/numerics.hpp"

namespace mvret {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

MsLossResult ms_loss(const Tensor& X, std::span<const std::size_t> labels, const MsLossParams& p) {
  require_rank(X, 2, "ms_loss descriptors");
  const std::size_t B = X.dim(0), d = X.dim(1);
  require(B >= 2, ErrorKind::shape, "ms_loss: needs at least 2 descriptors");
  require(labels.size() == B, ErrorKind::shape, "ms_loss: one label per descriptor");
  require(p.alpha > 0 && p.beta > 0, ErrorKind::config, "ms_loss: alpha and beta must be > 0");
  for (std::size_t i = 0; i < B; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += X[i * d + k] * X[i * d + k];
    require(std::abs(std::sqrt(s) - 1.0) <= 1e-6, ErrorKind::numeric,
            "ms_loss: descriptor " + std::to_string(i) + " is not unit-norm (|x| = " +
                std::to_string(std::sqrt(s)) + ")");
  }

  std::vector<double> S(B * B);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < B; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += X[i * d + c] * X[k * d + c];
      S[i * B + k] = s;
    }

  MsLossResult out;
  out.boundary_gap = kInf;
  std::vector<double> G(B * B, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    double max_neg = -kInf, min_pos = kInf;
    bool has_neg = false, has_pos = false;
    for (std::size_t k = 0; k < B; ++k) {
      if (k == i) continue;
      if (labels[k] == labels[i]) {
        has_pos = true;
        min_pos = std::min(min_pos, S[i * B + k]);
      } else {
        has_neg = true;
        max_neg = std::max(max_neg, S[i * B + k]);
      }
    }
    const double pos_thresh = has_neg ? max_neg + p.margin : kInf;
    const double neg_thresh = has_pos ? min_pos - p.margin : kInf;

    double sum_pos = 0.0, sum_neg = 0.0;
    std::vector<std::size_t> mined_pos, mined_neg;
    for (std::size_t k = 0; k < B; ++k) {
      if (k == i) continue;
      const double s = S[i * B + k];
      if (labels[k] == labels[i]) {
        if (has_neg) out.boundary_gap = std::min(out.boundary_gap, std::abs(s - pos_thresh));
        if (s <= pos_thresh) {
          mined_pos.push_back(k);
          sum_pos += std::exp(-p.alpha * (s - p.lambda_thresh));
        }
      } else {
        if (has_pos) out.boundary_gap = std::min(out.boundary_gap, std::abs(s - neg_thresh));
        if (s >= neg_thresh) {
          mined_neg.push_back(k);
          sum_neg += std::exp(p.beta * (s - p.lambda_thresh));
        }
      }
    }
    if (mined_pos.empty() && mined_neg.empty()) continue;
    ++out.active_anchors;
    total += std::log1p(sum_pos) / p.alpha + std::log1p(sum_neg) / p.beta;
    for (std::size_t k : mined_pos)
      G[i * B + k] = -std::exp(-p.alpha * (S[i * B + k] - p.lambda_thresh)) / (1.0 + sum_pos);
    for (std::size_t k : mined_neg)
      G[i * B + k] = std::exp(p.beta * (S[i * B + k] - p.lambda_thresh)) / (1.0 + sum_neg);
  }

  out.grad = Tensor({B, d});
  if (out.active_anchors == 0) return out;
  const double n = static_cast<double>(out.active_anchors);
  out.loss = total / n;
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t k = 0; k < B; ++k) {
      const double g = (G[a * B + k] + G[k * B + a]) / n;
      if (g == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) out.grad[a * d + c] += g * X[k * d + c];
    }
  return out;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  require(classes_per_batch >= 2, ErrorKind::config, "train: classes_per_batch must be >= 2");
  require(instances_per_class >= 2, ErrorKind::config, "train: instances_per_class must be >= 2");
  require(std::is_sorted(milestones.begin(), milestones.end()) &&
              std::adjacent_find(milestones.begin(), milestones.end()) == milestones.end(),
          ErrorKind::config, "train: milestones must be strictly ascending");
  require(lr_adapter >= 0 && lr_vfs >= 0 && momentum >= 0 && weight_decay >= 0 && gamma > 0,
          ErrorKind::config, "train: learning rates, momentum, weight decay must be >= 0, gamma > 0");
  require(!few_shot_limit || *few_shot_limit >= 1, ErrorKind::config,
          "train: few_shot_limit must be >= 1");
  require(loss.alpha > 0 && loss.beta > 0, ErrorKind::config, "train: ms alpha/beta must be > 0");
}

double lr_at_epoch(const TrainConfig& config, LearningGroup group, std::size_t epoch) {
  double lr = group == LearningGroup::vfs ? config.lr_vfs : config.lr_adapter;
  for (std::size_t m : config.milestones)
    if (m <= epoch) lr *= config.gamma;
  return lr;
}

OptimizerState optimizer_state_at(const TrainConfig& config, std::size_t epoch) {
  return {epoch, lr_at_epoch(config, LearningGroup::adapter, epoch),
          lr_at_epoch(config, LearningGroup::vfs, epoch)};
}

void sgd_momentum_step(std::span<ParamBlock* const> params, const OptimizerState& state,
                       const TrainConfig& config) {
  for (const ParamBlock* p : params)
    require(p->grad.all_finite(), ErrorKind::numeric,
            "non-finite gradient in parameter '" + p->name + "'");
  for (ParamBlock* p : params) {
    const double lr = state.lr(p->group);
    const double wd = p->weight_decay ? config.weight_decay : 0.0;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i] + wd * p->value[i];
      p->momentum[i] = config.momentum * p->momentum[i] + g;
      p->value[i] -= lr * p->momentum[i];
    }
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------

std::size_t TrainIndex::size() const {
  std::size_t n = 0;
  for (const auto& m : members) n += m.size();
  return n;
}

TrainIndex build_train_index(const DatasetManifest& manifest,
                             std::optional<std::size_t> few_shot_limit, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_label(manifest.label_names.size());
  for (std::size_t i = 0; i < manifest.objects.size(); ++i)
    if (manifest.objects[i].split == Split::train) by_label.at(manifest.objects[i].label).push_back(i);
  TrainIndex index;
  Rng rng(derive_seed(seed, 4));
  for (std::size_t c = 0; c < by_label.size(); ++c) {
    auto& members = by_label[c];
    if (members.empty()) continue;
    if (few_shot_limit && members.size() > *few_shot_limit) {
      auto pick = rng.sample_without_replacement(members.size(), *few_shot_limit);
      std::sort(pick.begin(), pick.end());
      std::vector<std::size_t> kept;
      for (std::size_t p : pick) kept.push_back(members[p]);
      members = std::move(kept);
    }
    index.classes.push_back(c);
    index.members.push_back(std::move(members));
  }
  return index;
}

std::vector<std::size_t> pk_sample_batch(const TrainIndex& index, std::size_t P, std::size_t K,
                                         Rng& rng) {
  require(index.classes.size() >= P, ErrorKind::config,
          "pk_sample_batch: " + std::to_string(index.classes.size()) + " train classes, need " +
              std::to_string(P));
  std::vector<std::size_t> batch;
  for (std::size_t c : rng.sample_without_replacement(index.classes.size(), P)) {
    const auto& m = index.members[c];
    if (m.size() >= K) {
      for (std::size_t j : rng.sample_without_replacement(m.size(), K)) batch.push_back(m[j]);
    } else {
      // Every member once, then random repeats to fill.
      for (std::size_t j : rng.sample_without_replacement(m.size(), m.size())) batch.push_back(m[j]);
      for (std::size_t r = m.size(); r < K; ++r) batch.push_back(m[rng.index(m.size())]);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------

std::vector<ParamBlock*> MlpParameters::params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
std::vector<const ParamBlock*> MlpParameters::params() const {
  return {&w1, &b1, &w2, &b2, &w3, &b3};
}

MlpParameters init_mlp_parameters(std::size_t dim, Rng& rng) {
  require(dim >= 1, ErrorKind::config, "mlp: dim must be >= 1");
  const std::size_t h = std::max<std::size_t>(1, dim / 4);
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
    return t;
  };
  const auto g = LearningGroup::adapter;
  Tensor w1 = uniform({h, dim}, dim), b1 = uniform({h}, dim);
  Tensor w2 = uniform({h, h}, h), b2 = uniform({h}, h);
  Tensor w3 = uniform({dim, h}, h), b3 = uniform({dim}, h);
  return MlpParameters{
      ParamBlock("mlp.fc1.weight", std::move(w1), g), ParamBlock("mlp.fc1.bias", std::move(b1), g),
      ParamBlock("mlp.fc2.weight", std::move(w2), g), ParamBlock("mlp.fc2.bias", std::move(b2), g),
      ParamBlock("mlp.fc3.weight", std::move(w3), g), ParamBlock("mlp.fc3.bias", std::move(b3), g),
  };
}

MlpOutput mlp_forward(const Tensor& batch, double lambda, bool normalize, const MlpParameters& p) {
  require_rank(batch, 3, "mlp input");
  require(batch.dim(2) == p.w1.value.dim(1), ErrorKind::shape, "mlp: input dim mismatch");
  MlpOutput out;
  auto& c = out.cache;
  c.gap = mean_pool_batch(batch, false);
  c.h1 = linear(c.gap, p.w1.value, p.b1.value);
  c.h2 = linear(relu(c.h1), p.w2.value, p.b2.value);
  const Tensor o = linear(relu(c.h2), p.w3.value, p.b3.value);
  c.fused = Tensor(c.gap.shape());
  for (std::size_t i = 0; i < o.size(); ++i) c.fused[i] = lambda * c.gap[i] + (1.0 - lambda) * o[i];
  out.descriptors = normalize ? l2_normalize_rows(c.fused) : c.fused;
  return out;
}

Tensor mlp_backward(const Tensor& grad, const MlpCache& c, std::size_t views, double lambda,
                    bool normalize, MlpParameters& p) {
  require_shape(grad, c.fused.shape(), "mlp_backward grad");
  const Tensor d_fused = normalize ? l2_normalize_rows_backward(grad, c.fused) : grad;
  Tensor d_o(d_fused.shape());
  for (std::size_t i = 0; i < d_o.size(); ++i) d_o[i] = (1.0 - lambda) * d_fused[i];
  auto l3 = linear_backward(d_o, relu(c.h2), p.w3.value);
  accumulate(p.w3.grad, l3.weights);
  accumulate(p.b3.grad, l3.bias);
  auto l2 = linear_backward(relu_backward(l3.input, c.h2), relu(c.h1), p.w2.value);
  accumulate(p.w2.grad, l2.weights);
  accumulate(p.b2.grad, l2.bias);
  auto l1 = linear_backward(relu_backward(l2.input, c.h1), c.gap, p.w1.value);
  accumulate(p.w1.grad, l1.weights);
  accumulate(p.b1.grad, l1.bias);
  const std::size_t B = c.gap.dim(0), d = c.gap.dim(1);
  Tensor gx({B, views, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < d; ++k) {
      const double g = (l1.input[b * d + k] + lambda * d_fused[b * d + k]) / static_cast<double>(views);
      for (std::size_t m = 0; m < views; ++m) gx[(b * views + m) * d + k] = g;
    }
  return gx;
}

// ---------------------------------------------------------------------------

std::string_view to_string(AdapterKind kind) { return kind == AdapterKind::cam ? "cam" : "mlp"; }

AdapterKind parse_adapter_kind(std::string_view text) {
  if (text == "cam") return AdapterKind::cam;
  if (text == "mlp") return AdapterKind::mlp;
  fail(ErrorKind::config, "unknown adapter '" + std::string(text) + "' (cam|mlp)");
}

std::vector<ParamBlock*> Model::params() {
  std::vector<ParamBlock*> out = adapter == AdapterKind::cam ? cam.params() : mlp->params();
  if (vfs)
    for (ParamBlock* p : vfs->params()) out.push_back(p);
  return out;
}

std::vector<const ParamBlock*> Model::params() const {
  std::vector<const ParamBlock*> out = adapter == AdapterKind::cam
                                           ? cam.params()
                                           : static_cast<const MlpParameters&>(*mlp).params();
  if (vfs)
    for (const ParamBlock* p : static_cast<const VfsParameters&>(*vfs).params()) out.push_back(p);
  return out;
}

Model init_model(AdapterKind adapter, const CamConfig& cam_config, std::size_t clip_dim,
                 const VfsConfig& vfs_config, std::uint64_t seed) {
  cam_config.validate();
  Model m;
  m.adapter = adapter;
  m.cam_config = cam_config;
  if (adapter == AdapterKind::cam) {
    Rng rng(derive_seed(seed, 10));
    m.cam = init_cam_parameters(cam_config, rng);
  } else {
    Rng rng(derive_seed(seed, 11));
    m.mlp = init_mlp_parameters(cam_config.dino_dim, rng);
  }
  if (clip_dim > 0) {
    Rng rng(derive_seed(seed, 12));
    m.vfs = init_vfs_parameters(clip_dim, cam_config.dino_dim, rng, vfs_config.hidden);
  }
  return m;
}

Tensor describe(const Model& model, const Tensor& views) {
  if (model.adapter == AdapterKind::cam) return cam_describe(views, model.cam_config, model.cam);
  return mlp_forward(views, model.cam_config.lambda, model.cam_config.normalize_descriptor, *model.mlp)
      .descriptors;
}

// ---------------------------------------------------------------------------

namespace {

struct AdapterPass {
  Tensor descriptors;
  CamCache cam;
  MlpCache mlp;
  std::size_t views = 0;
};

AdapterPass adapter_forward(Model& model, const Tensor& batch, bool update_running) {
  AdapterPass pass;
  pass.views = batch.dim(1);
  if (model.adapter == AdapterKind::cam) {
    auto out = cam_forward(batch, model.cam_config, model.cam, Mode::train,
                           CamOptions{update_running, true});
    pass.descriptors = std::move(out.descriptors);
    pass.cam = std::move(out.cache);
  } else {
    auto out = mlp_forward(batch, model.cam_config.lambda, model.cam_config.normalize_descriptor,
                           *model.mlp);
    pass.descriptors = std::move(out.descriptors);
    pass.mlp = std::move(out.cache);
  }
  return pass;
}

Tensor adapter_backward(Model& model, const Tensor& grad, const AdapterPass& pass) {
  if (model.adapter == AdapterKind::cam)
    return cam_backward(grad, pass.cam, model.cam_config, model.cam);
  return mlp_backward(grad, pass.mlp, pass.views, model.cam_config.lambda,
                      model.cam_config.normalize_descriptor, *model.mlp);
}

double min_abs(const Tensor& t, double m) {
  for (double v : t.storage()) m = std::min(m, std::abs(v));
  return m;
}

double pass_kink_gap(const AdapterPass& pass, double m) {
  for (const auto& b : pass.cam.blocks)
    if (b.applied) m = min_abs(b.bn_output, m);
  return min_abs(pass.mlp.h2, min_abs(pass.mlp.h1, m));
}

Tensor row_block(const Tensor& t, std::size_t begin, std::size_t count) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = count;
  Tensor out(shape);
  std::copy_n(t.data() + begin * stride, count * stride, out.data());
  return out;
}

}  // namespace

TrainingProblem::TrainingProblem(const Dataset& dataset, Model& model, const TrainConfig& train,
                                 const VfsConfig& vfs)
    : data_(dataset), model_(model), train_(train), vfs_config_(vfs) {
  train_.validate();
  const auto& m = dataset.manifest;
  require(model.cam_config.dino_dim == m.dino_dim, ErrorKind::config,
          "model dino_dim does not match the dataset");
  index_ = build_train_index(m, train_.few_shot_limit, train_.seed);
  require(index_.size() > 0, ErrorKind::config, "dataset has no train split");
  require(index_.classes.size() >= train_.classes_per_batch, ErrorKind::config,
          "dataset has fewer train classes than classes_per_batch");

  const std::size_t C = m.label_names.size(), d = m.dino_dim, M = m.views_per_object;
  class_dino_mean_ = Tensor({C, d});
  for (std::size_t ci = 0; ci < index_.classes.size(); ++ci) {
    const std::size_t c = index_.classes[ci];
    for (std::size_t obj : index_.members[ci])
      for (std::size_t v = 0; v < M; ++v)
        for (std::size_t k = 0; k < d; ++k) class_dino_mean_[c * d + k] += dataset.dino[(obj * M + v) * d + k];
    const double n = static_cast<double>(index_.members[ci].size() * M);
    for (std::size_t k = 0; k < d; ++k) class_dino_mean_[c * d + k] /= n;
  }

  if (!train_.vfs_enabled) return;
  require(dataset.clip.has_value() && dataset.text.has_value(), ErrorKind::unavailable,
          "VfsUnavailable: dataset has no clip features or text table");
  require(model.vfs.has_value(), ErrorKind::config, "VFS enabled but the model has no VFS parameters");
  require(model.vfs->clip_dim() == m.clip_dim, ErrorKind::config,
          "model clip_dim does not match the dataset");

  // Active lexicon: the dataset lexicon, optionally restricted to a name list.
  std::vector<std::size_t> rows;
  std::vector<std::string> names;
  if (vfs.lexicon.empty()) {
    for (std::size_t i = 0; i < m.lexicon_names.size(); ++i) rows.push_back(i);
  } else {
    std::map<std::string, std::size_t> where;
    for (std::size_t i = 0; i < m.lexicon_names.size(); ++i) where.emplace(lower(m.lexicon_names[i]), i);
    for (const auto& name : vfs.lexicon) {
      auto it = where.find(lower(name));
      require(it != where.end(), ErrorKind::config,
              "lexicon name '" + name + "' has no text embedding in the dataset");
      rows.push_back(it->second);
    }
  }
  for (std::size_t r : rows) names.push_back(m.lexicon_names[r]);
  const std::size_t dc = m.clip_dim;
  const Tensor& text = *dataset.text;
  vfs_text_ = Tensor({C + rows.size(), dc});
  std::copy_n(text.data(), C * dc, vfs_text_.data());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(text.data() + (C + rows[i]) * dc, dc, vfs_text_.data() + (C + i) * dc);

  std::vector<std::string> seen;
  for (std::size_t c : index_.classes) seen.push_back(m.label_names[c]);
  space_ = enrich_label_space(seen, names, vfs.E, vfs.mode, train_.seed);
}

std::vector<std::size_t> TrainingProblem::epoch_selection(std::size_t epoch) const {
  if (!space_ || space_->mode != SelectionMode::random_e) return {};
  EnrichedLabelSpace s = *space_;
  s.selection_seed = train_.seed + epoch;
  return select_concepts(s, nullptr, Tensor({s.new_names.size(), 1}));
}

StepLoss TrainingProblem::step(std::span<const std::size_t> batch,
                               std::span<const std::size_t> selected, std::uint64_t step_seed,
                               bool backward, bool update_running_stats) {
  const auto& m = data_.manifest;
  const std::size_t B = batch.size(), M = m.views_per_object, d = m.dino_dim;
  const std::size_t C = m.label_names.size();
  const Tensor x = gather_rows(data_.dino, batch);
  std::vector<std::size_t> labels = object_labels(m, batch);

  AdapterPass real = adapter_forward(model_, x, update_running_stats);
  Tensor descriptors = real.descriptors;
  std::vector<std::size_t> all_labels = labels;

  Rng rng(step_seed);
  std::optional<VirtualViewSet> virt;
  std::optional<AdapterPass> vpass;
  Tensor clip_batch;
  if (space_) {
    clip_batch = gather_rows(*data_.clip, batch);
    VirtualBatchInputs in{&x, &clip_batch, labels, &vfs_text_, C, C};
    virt = build_virtual_batch(in, *space_, selected, *model_.vfs, rng);
    vpass = adapter_forward(model_, virt->values, false);
    Tensor both({2 * B, d});
    std::copy_n(descriptors.data(), B * d, both.data());
    std::copy_n(vpass->descriptors.data(), B * d, both.data() + B * d);
    descriptors = std::move(both);
    all_labels.insert(all_labels.end(), virt->pseudo_labels.begin(), virt->pseudo_labels.end());
  }

  StepLoss loss;
  const MsLossResult ms = ms_loss(descriptors, all_labels, train_.loss);
  loss.ms = ms.loss;
  loss.boundary_gap = ms.boundary_gap;

  // Seen-to-seen alignment: shift a real clip view towards another train
  // class and regress psi onto that class's mean DINO feature.
  std::optional<SynthesisOutput> align_syn;
  Tensor align_grad;
  const double w = vfs_config_.align_weight;
  if (space_ && w > 0.0) {
    const std::size_t dc = m.clip_dim;
    Tensor seen({B, dc}), target({B, dc});
    std::vector<std::size_t> j(B);
    for (std::size_t b = 0; b < B; ++b) {
      j[b] = index_.classes[rng.index(index_.classes.size())];
      std::copy_n(vfs_text_.data() + labels[b] * dc, dc, seen.data() + b * dc);
      std::copy_n(vfs_text_.data() + j[b] * dc, dc, target.data() + b * dc);
    }
    align_syn = synthesize_virtual_views(clip_batch, seen, target, *model_.vfs);
    const Tensor& v = align_syn->values;
    align_grad = Tensor(v.shape());
    const double n = static_cast<double>(B * M);
    double sum = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t mm = 0; mm < M; ++mm)
        for (std::size_t k = 0; k < d; ++k) {
          const std::size_t i = (b * M + mm) * d + k;
          const double r = v[i] - class_dino_mean_[j[b] * d + k];
          sum += r * r;
          align_grad[i] = w * 2.0 * r / n;
        }
    loss.align = sum / n;
  }
  loss.total = loss.ms + w * loss.align;
  loss.kink_gap = pass_kink_gap(real, kInf);
  if (vpass) loss.kink_gap = min_abs(virt->synthesis.cache.hidden, pass_kink_gap(*vpass, loss.kink_gap));
  if (align_syn) loss.kink_gap = min_abs(align_syn->cache.hidden, loss.kink_gap);
  if (!backward) return loss;

  adapter_backward(model_, row_block(ms.grad, 0, B), real);
  if (virt) {
    const Tensor gv = adapter_backward(model_, row_block(ms.grad, B, B), *vpass);
    virtual_batch_backward(gv, *virt, *model_.vfs);
  }
  if (align_syn) synthesis_backward(align_grad, align_syn->cache, *model_.vfs);
  return loss;
}

// ---------------------------------------------------------------------------

FitResult fit(const Dataset& dataset, AdapterKind adapter, const CamConfig& cam_config,
              const TrainConfig& train, const VfsConfig& vfs) {
  train.validate();
  TrainConfig tc = train;
  FitResult result;
  const bool vfs_possible = dataset.clip.has_value() && dataset.text.has_value();
  if (tc.vfs_enabled && !vfs_possible) {
    result.warnings.push_back(
        "VfsUnavailable: dataset has no clip features or text table; training the adapter alone");
    tc.vfs_enabled = false;
  }
  CamConfig cc = cam_config;
  if (cc.dino_dim == 0) cc.dino_dim = dataset.manifest.dino_dim;
  Model model = init_model(adapter, cc, tc.vfs_enabled ? dataset.manifest.clip_dim : 0, vfs, tc.seed);
  {
    TrainingProblem problem(dataset, model, tc, vfs);
    const std::size_t per_batch = tc.classes_per_batch * tc.instances_per_class;
    const std::size_t batches = (problem.index().size() + per_batch - 1) / per_batch;
    Rng batch_rng(derive_seed(tc.seed, 1));
    const std::uint64_t step_base = derive_seed(tc.seed, 2);
    const auto params = model.params();
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
      const OptimizerState state = optimizer_state_at(tc, epoch);
      const auto selected = problem.epoch_selection(epoch);
      double total = 0.0;
      for (std::size_t b = 0; b < batches; ++b) {
        const auto batch = pk_sample_batch(problem.index(), tc.classes_per_batch,
                                           tc.instances_per_class, batch_rng);
        total += problem.step(batch, selected, derive_seed(step_base, epoch * batches + b), true, true).total;
        sgd_momentum_step(params, state, tc);
      }
      result.log.push_back({epoch, total / static_cast<double>(batches), state.lr_adapter, state.lr_vfs});
    }
    result.vfs_used = problem.vfs_active();
  }
  result.model = std::move(model);
  return result;
}

std::string serialize_training_log(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["mean_loss"] = e.mean_loss;
    j["lr_adapter"] = e.lr_adapter;
    j["lr_vfs"] = e.lr_vfs;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace mvret
