#include "mvret/vfs.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "mvret/error.hpp"
#include "mvret/numerics.hpp"

namespace mvret {

std::string_view to_string(SelectionMode mode) {
  return mode == SelectionMode::random_e ? "random_e" : "top_e";
}

SelectionMode parse_selection_mode(std::string_view text) {
  if (text == "random_e") return SelectionMode::random_e;
  if (text == "top_e") return SelectionMode::top_e;
  fail(ErrorKind::config, "unknown selection mode '" + std::string(text) + "' (random_e|top_e)");
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

}  // namespace

std::vector<std::string> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open lexicon " + path.string());
  std::vector<std::string> names;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    std::string name = trim(line);
    if (name.empty()) continue;
    if (seen.insert(lower(name)).second) names.push_back(std::move(name));
  }
  return names;
}

EnrichedLabelSpace enrich_label_space(const std::vector<std::string>& seen_names,
                                      const std::vector<std::string>& lexicon_names, std::size_t E,
                                      SelectionMode mode, std::uint64_t seed) {
  std::set<std::string> seen;
  for (const auto& n : seen_names) seen.insert(lower(n));
  EnrichedLabelSpace space;
  space.seen_names = seen_names;
  for (std::size_t i = 0; i < lexicon_names.size(); ++i) {
    if (seen.count(lower(lexicon_names[i]))) continue;
    space.new_names.push_back(lexicon_names[i]);
    space.new_lexicon_index.push_back(i);
  }
  require(!space.new_names.empty(), ErrorKind::config, "lexicon is empty after removing seen labels");
  require(E >= 1, ErrorKind::config, "E must be >= 1");
  require(E <= space.new_names.size(), ErrorKind::config,
          "E = " + std::to_string(E) + " exceeds the " + std::to_string(space.new_names.size()) +
              " new concepts available");
  space.E = E;
  space.mode = mode;
  space.selection_seed = seed;
  return space;
}

std::vector<std::size_t> select_concepts(const EnrichedLabelSpace& space, const Tensor* anchor,
                                         const Tensor& new_text) {
  const std::size_t n = space.new_names.size();
  require(space.E >= 1 && space.E <= n, ErrorKind::config, "select_concepts: invalid E");
  if (space.mode == SelectionMode::random_e) {
    Rng rng(space.selection_seed);
    return rng.sample_without_replacement(n, space.E);
  }
  require(anchor != nullptr, ErrorKind::config, "select_concepts: top_e needs an anchor feature");
  require_rank(new_text, 2, "select_concepts text");
  require(new_text.dim(0) == n, ErrorKind::shape, "select_concepts: one text row per new name");
  const Tensor sims = cosine_similarity_matrix(anchor->reshaped({1, anchor->size()}), new_text);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  order.resize(space.E);
  return order;
}

// ---------------------------------------------------------------------------

std::vector<ParamBlock*> VfsParameters::params() { return {&w1, &b1, &w2, &b2, &eps, &alpha, &beta}; }
std::vector<const ParamBlock*> VfsParameters::params() const {
  return {&w1, &b1, &w2, &b2, &eps, &alpha, &beta};
}

VfsParameters init_vfs_parameters(std::size_t clip_dim, std::size_t dino_dim, Rng& rng,
                                  std::size_t hidden) {
  require(clip_dim >= 1 && dino_dim >= 1, ErrorKind::config, "vfs: dims must be >= 1");
  if (hidden == 0) hidden = dino_dim;
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
    return t;
  };
  const auto g = LearningGroup::vfs;
  Tensor w1 = uniform({hidden, clip_dim}, clip_dim);
  Tensor w2 = uniform({dino_dim, hidden}, hidden);
  return VfsParameters{
      ParamBlock("vfs.psi.fc1.weight", std::move(w1), g),
      ParamBlock("vfs.psi.fc1.bias", Tensor({hidden}), g),
      ParamBlock("vfs.psi.fc2.weight", std::move(w2), g),
      ParamBlock("vfs.psi.fc2.bias", Tensor({dino_dim}), g),
      ParamBlock("vfs.eps", Tensor({1}, 1.0), g, false),
      ParamBlock("vfs.alpha", Tensor({1}, 0.5), g, false),
      ParamBlock("vfs.beta", Tensor({1}, 0.5), g, false),
  };
}

Tensor psi_forward(const VfsParameters& params, const Tensor& x) {
  return linear(relu(linear(x, params.w1.value, params.b1.value)), params.w2.value, params.b2.value);
}

SynthesisOutput synthesize_virtual_views(const Tensor& clip_views, const Tensor& seen_text,
                                         const Tensor& unseen_text, const VfsParameters& params) {
  const bool batched = clip_views.rank() == 3;
  require(batched || clip_views.rank() == 2, ErrorKind::shape,
          "synthesize: clip views must be [B, M, d_c] or [M, d_c]");
  const std::size_t B = batched ? clip_views.dim(0) : 1;
  const std::size_t M = clip_views.dim(batched ? 1 : 0);
  const std::size_t dc = clip_views.shape().back();
  require(dc == params.clip_dim(), ErrorKind::shape, "synthesize: clip dim does not match psi");
  require(seen_text.size() == B * dc && unseen_text.size() == B * dc, ErrorKind::shape,
          "synthesize: need one seen and one unseen text row per sample");

  SynthesisOutput out;
  Tensor delta({B, dc});
  for (std::size_t i = 0; i < B * dc; ++i) delta[i] = unseen_text[i] - seen_text[i];
  out.cache.shift = layer_norm(delta);
  const double eps = params.eps.value[0];
  out.cache.input = Tensor({B, M, dc});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < dc; ++k)
        out.cache.input[(b * M + m) * dc + k] =
            clip_views[(b * M + m) * dc + k] + eps * out.cache.shift[b * dc + k];
  out.cache.hidden = linear(out.cache.input, params.w1.value, params.b1.value);
  out.values = linear(relu(out.cache.hidden), params.w2.value, params.b2.value);
  if (!batched) out.values = out.values.reshaped({M, params.dino_dim()});
  return out;
}

void synthesis_backward(const Tensor& grad_values, const SynthesisCache& cache,
                        VfsParameters& params) {
  const std::size_t B = cache.input.dim(0), M = cache.input.dim(1), dc = cache.input.dim(2);
  require(grad_values.size() == B * M * params.dino_dim(), ErrorKind::shape,
          "synthesis_backward: gradient size");
  const Tensor g = grad_values.reshaped({B, M, params.dino_dim()});
  const Tensor act = relu(cache.hidden);
  auto l2 = linear_backward(g, act, params.w2.value);
  accumulate(params.w2.grad, l2.weights);
  accumulate(params.b2.grad, l2.bias);
  auto l1 = linear_backward(relu_backward(l2.input, cache.hidden), cache.input, params.w1.value);
  accumulate(params.w1.grad, l1.weights);
  accumulate(params.b1.grad, l1.bias);
  double d_eps = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < dc; ++k)
        d_eps += l1.input[(b * M + m) * dc + k] * cache.shift[b * dc + k];
  params.eps.grad[0] += d_eps;
}

Tensor fuse_virtual_features(const Tensor& synth, const Tensor& real_views,
                             const VfsParameters& params) {
  require_shape(real_views, synth.shape(), "fuse real views");
  const double a = params.alpha.value[0], b = params.beta.value[0];
  Tensor out(synth.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * synth[i] + b * real_views[i];
  return out;
}

FusionGrads fuse_backward(const Tensor& grad_fused, const Tensor& synth, const Tensor& real_views,
                          VfsParameters& params) {
  require_shape(grad_fused, synth.shape(), "fuse gradient");
  require_shape(real_views, synth.shape(), "fuse real views");
  const double a = params.alpha.value[0], b = params.beta.value[0];
  FusionGrads g{Tensor(synth.shape()), Tensor(synth.shape())};
  double da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < synth.size(); ++i) {
    da += grad_fused[i] * synth[i];
    db += grad_fused[i] * real_views[i];
    g.synth[i] = a * grad_fused[i];
    g.real_views[i] = b * grad_fused[i];
  }
  params.alpha.grad[0] += da;
  params.beta.grad[0] += db;
  return g;
}

// ---------------------------------------------------------------------------

Tensor new_name_text(const EnrichedLabelSpace& space, const Tensor& text, std::size_t lexicon_offset) {
  require_rank(text, 2, "text table");
  const std::size_t dc = text.dim(1);
  Tensor out({space.new_names.size(), dc});
  for (std::size_t i = 0; i < space.new_names.size(); ++i) {
    const std::size_t row = lexicon_offset + space.new_lexicon_index[i];
    require(row < text.dim(0), ErrorKind::shape, "text table has no row for " + space.new_names[i]);
    std::copy_n(text.data() + row * dc, dc, out.data() + i * dc);
  }
  return out;
}

VirtualViewSet build_virtual_batch(const VirtualBatchInputs& in, const EnrichedLabelSpace& space,
                                   std::span<const std::size_t> selected,
                                   const VfsParameters& params, Rng& rng) {
  require(in.clip_views != nullptr && in.text != nullptr, ErrorKind::unavailable,
          "VfsUnavailable: virtual synthesis needs clip features and text embeddings");
  require(in.real_views != nullptr, ErrorKind::config, "build_virtual_batch: no real views");
  const Tensor& real = *in.real_views;
  const Tensor& clip = *in.clip_views;
  const Tensor& text = *in.text;
  require_rank(real, 3, "virtual batch real views");
  require_rank(clip, 3, "virtual batch clip views");
  const std::size_t B = real.dim(0), M = real.dim(1), dc = clip.dim(2);
  require(clip.dim(0) == B && clip.dim(1) == M, ErrorKind::shape,
          "build_virtual_batch: clip views do not match real views");
  require(in.labels.size() == B, ErrorKind::shape, "build_virtual_batch: one label per sample");
  if (space.mode == SelectionMode::random_e)
    require(!selected.empty(), ErrorKind::config, "build_virtual_batch: empty concept selection");

  const Tensor candidates = new_name_text(space, text, in.lexicon_offset);
  VirtualViewSet out;
  Tensor seen({B, dc}), unseen({B, dc});
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t concept_index;
    if (space.mode == SelectionMode::random_e) {
      concept_index = selected[rng.index(selected.size())];
    } else {
      Tensor anchor({dc});
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < dc; ++k) anchor[k] += clip[(b * M + m) * dc + k];
      for (std::size_t k = 0; k < dc; ++k) anchor[k] /= static_cast<double>(M);
      const auto top = select_concepts(space, &anchor, candidates);
      concept_index = top[rng.index(top.size())];
    }
    require(concept_index < space.new_names.size(), ErrorKind::config,
            "build_virtual_batch: concept index out of range");
    require(in.labels[b] < text.dim(0), ErrorKind::shape, "build_virtual_batch: label has no text row");
    std::copy_n(text.data() + in.labels[b] * dc, dc, seen.data() + b * dc);
    std::copy_n(candidates.data() + concept_index * dc, dc, unseen.data() + b * dc);
    out.concepts.push_back(concept_index);
    out.pseudo_labels.push_back(in.label_offset + concept_index);
  }
  out.synthesis = synthesize_virtual_views(clip, seen, unseen, params);
  out.values = fuse_virtual_features(out.synthesis.values, real, params);
  out.real_views = real;
  return out;
}

void virtual_batch_backward(const Tensor& grad_values, const VirtualViewSet& batch,
                            VfsParameters& params) {
  auto g = fuse_backward(grad_values, batch.synthesis.values, batch.real_views, params);
  synthesis_backward(g.synth, batch.synthesis.cache, params);
}

// ---------------------------------------------------------------------------

double expansion_residual(std::size_t quadruples, std::size_t dim, Rng& rng) {
  double worst = 0.0;
  std::vector<double> a(dim), b(dim), c(dim), d(dim);
  auto dot = [&](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += x[k] * y[k];
    return s;
  };
  for (std::size_t q = 0; q < quadruples; ++q) {
    for (auto* v : {&a, &b, &c, &d})
      for (auto& x : *v) x = rng.normal();
    double lhs = 0.0;
    for (std::size_t k = 0; k < dim; ++k) lhs += (a[k] - b[k]) * (c[k] - d[k]);
    const double rhs = (dot(a, c) + dot(b, d)) - (dot(a, d) + dot(b, c));
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

BoundReport bound_report(const VfsParameters& params, const Dataset& ds, const BoundOptions& opt) {
  require(ds.clip.has_value() && ds.text.has_value(), ErrorKind::unavailable,
          "bound_report needs clip features and text embeddings");
  const auto& m = ds.manifest;
  const Tensor& clip = *ds.clip;
  const Tensor& text = *ds.text;
  const std::size_t M = m.views_per_object, dc = m.clip_dim, C = m.label_names.size();
  require(dc == params.clip_dim(), ErrorKind::shape, "bound_report: clip dim does not match psi");
  const auto train = split_indices(m, Split::train);
  std::vector<std::size_t> retrieval = split_indices(m, Split::query);
  for (std::size_t i : split_indices(m, Split::target)) retrieval.push_back(i);
  require(!train.empty() && !retrieval.empty(), ErrorKind::unavailable,
          "bound_report needs seen training objects and unseen ground truth");
  require(opt.anchors >= 1 && opt.slack > 0, ErrorKind::config, "bound_report: invalid options");

  // Per-class mean clip feature over all views.
  Tensor means({C, dc});
  std::vector<std::size_t> counts(C, 0);
  auto add_object = [&](std::size_t obj) {
    const std::size_t y = m.objects[obj].label;
    for (std::size_t v = 0; v < M; ++v)
      for (std::size_t k = 0; k < dc; ++k) means[y * dc + k] += clip[(obj * M + v) * dc + k];
    counts[y] += M;
  };
  for (std::size_t i : train) add_object(i);
  for (std::size_t i : retrieval) add_object(i);
  for (std::size_t y = 0; y < C; ++y)
    for (std::size_t k = 0; k < dc; ++k)
      if (counts[y]) means[y * dc + k] /= static_cast<double>(counts[y]);

  BoundReport report;
  report.slack = opt.slack;

  double ss = 0.0;
  for (std::size_t obj : train) {
    const std::size_t y = m.objects[obj].label;
    for (std::size_t v = 0; v < M; ++v)
      for (std::size_t k = 0; k < dc; ++k) {
        const double diff = clip[(obj * M + v) * dc + k] - means[y * dc + k];
        ss += diff * diff;
      }
  }
  report.sigma_sq = ss / static_cast<double>(train.size() * M);

  std::set<std::size_t> unseen_set;
  for (std::size_t i : retrieval) unseen_set.insert(m.objects[i].label);
  const std::vector<std::size_t> unseen(unseen_set.begin(), unseen_set.end());

  Rng rng(opt.seed);
  std::vector<std::size_t> anchor_obj(opt.anchors), anchor_view(opt.anchors);
  for (std::size_t a = 0; a < opt.anchors; ++a) {
    anchor_obj[a] = train[rng.index(train.size())];
    anchor_view[a] = rng.index(M);
  }

  // Pool of psi inputs: shifted anchors for every unseen class, then class means.
  const std::size_t A = opt.anchors, U = unseen.size();
  Tensor pool({U * A + U, dc});
  const double eps = params.eps.value[0];
  for (std::size_t ui = 0; ui < U; ++ui) {
    Tensor delta({A, dc});
    for (std::size_t a = 0; a < A; ++a) {
      const std::size_t ya = m.objects[anchor_obj[a]].label;
      for (std::size_t k = 0; k < dc; ++k)
        delta[a * dc + k] = text[unseen[ui] * dc + k] - text[ya * dc + k];
    }
    const Tensor shift = layer_norm(delta);
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t k = 0; k < dc; ++k)
        pool[(ui * A + a) * dc + k] =
            clip[(anchor_obj[a] * M + anchor_view[a]) * dc + k] + eps * shift[a * dc + k];
    std::copy_n(means.data() + unseen[ui] * dc, dc, pool.data() + (U * A + ui) * dc);
  }
  const Tensor out = psi_forward(params, pool);
  const std::size_t d = out.dim(1);
  auto distance = [](const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += (x[k] - y[k]) * (x[k] - y[k]);
    return std::sqrt(s);
  };

  for (std::size_t ui = 0; ui < U; ++ui) {
    const double* target = out.data() + (U * A + ui) * d;
    double total = 0.0;
    for (std::size_t a = 0; a < A; ++a) total += distance(out.data() + (ui * A + a) * d, target, d);
    report.unseen_names.push_back(m.label_names[unseen[ui]]);
    report.deviations.push_back(total / static_cast<double>(A));
  }

  const std::size_t P = pool.dim(0);
  for (std::size_t s = 0; s < opt.sample_pairs; ++s) {
    const std::size_t i = rng.index(P), j = rng.index(P);
    const double dx = distance(pool.data() + i * dc, pool.data() + j * dc, dc);
    if (dx < 1e-9) continue;
    const double dy = distance(out.data() + i * d, out.data() + j * d, d);
    report.lipschitz_estimate = std::max(report.lipschitz_estimate, dy / dx);
  }

  report.bound = report.lipschitz_estimate * report.sigma_sq;
  std::vector<double> sorted = report.deviations;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  report.median_deviation = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::size_t violations = 0;
  for (double dev : report.deviations) violations += dev > opt.slack * report.bound;
  report.violation_rate = static_cast<double>(violations) / static_cast<double>(n);

  Rng expansion_rng(derive_seed(opt.seed, 7));
  report.expansion_max_residual = expansion_residual(opt.expansion_quadruples, dc, expansion_rng);
  return report;
}

}  // namespace mvret
