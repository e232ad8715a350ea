#include <algorithm>
#include <cmath>
#include <map>
#include <omp.h>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "mvret/error.hpp"
#include "mvret/gradcheck.hpp"
#include "mvret/numerics.hpp"
#include "mvret/retrieval.hpp"
#include "mvret/training.hpp"
#include "oracles/naive_ms_loss.hpp"
#include "support.hpp"

using namespace mvret;
using testing_support::max_abs_diff;
using testing_support::project;
using testing_support::random_tensor;

namespace {

Tensor unit_rows(Tensor t) { return l2_normalize_rows(t); }

std::vector<std::vector<double>> to_rows(const Tensor& t) {
  std::vector<std::vector<double>> rows(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t k = 0; k < t.dim(1); ++k) rows[i][k] = t[i * t.dim(1) + k];
  return rows;
}

bool same_values(const Model& a, const Model& b) {
  auto pa = a.params(), pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->name != pb[i]->name || !(pa[i]->value == pb[i]->value)) return false;
  for (std::size_t i = 0; i < a.cam.blocks.size(); ++i)
    if (!(a.cam.blocks[i].running_mean == b.cam.blocks[i].running_mean) ||
        !(a.cam.blocks[i].running_var == b.cam.blocks[i].running_var))
      return false;
  return true;
}

bool is_conv_bias(const ParamBlock* p) {
  return p->name.find("conv.bias") != std::string::npos;
}

}  // namespace

TEST_CASE("ms_loss closed forms") {
  // Two classes, similarity far below the threshold, no positives: nothing mined.
  Tensor apart({2, 2}, std::vector<double>{1, 0, -0.6, 0.8});
  std::vector<std::size_t> two{0, 1};
  auto r = ms_loss(apart, two);
  CHECK(r.loss == 0.0);
  CHECK(r.active_anchors == 0);
  CHECK(max_abs_diff(r.grad, Tensor({2, 2})) == 0.0);

  // Two identical same-class descriptors.
  Tensor same({2, 3}, std::vector<double>{0.6, 0.8, 0, 0.6, 0.8, 0});
  std::vector<std::size_t> one{4, 4};
  auto s = ms_loss(same, one);
  CHECK(s.loss == doctest::Approx(0.5 * std::log1p(std::exp(-1.0))).epsilon(1e-14));
  CHECK(s.loss == doctest::Approx(0.156630).epsilon(1e-5));

  Tensor off({2, 2}, std::vector<double>{1.0, 1e-2, 0, 1});
  CHECK_THROWS_AS(ms_loss(off, two), Error);
  CHECK_THROWS_AS(ms_loss(Tensor({1, 2}, std::vector<double>{1, 0}), std::vector<std::size_t>{0}), Error);
}

TEST_CASE("ms_loss matches the naive oracle and finite differences") {
  std::size_t fd_checked = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t d = 4 + rng.index(12);
    // Correlated classes so both mined sets are usually nonempty.
    Tensor raw({8, d});
    Tensor c0 = random_tensor({d}, rng), c1 = random_tensor({d}, rng);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t k = 0; k < d; ++k)
        raw[i * d + k] = (i < 4 ? c0[k] : c1[k]) + 0.8 * rng.normal();
    std::vector<std::size_t> y{0, 0, 0, 0, 1, 1, 1, 1};
    const Tensor X = unit_rows(raw);
    auto got = ms_loss(X, y);
    auto want = oracle::ms_loss(to_rows(X), y);
    CHECK(std::abs(got.loss - want.loss) <= 1e-10);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t k = 0; k < d; ++k) CHECK(std::abs(got.grad[i * d + k] - want.grad[i][k]) <= 1e-10);
    CHECK(got.loss >= 0.0);

    if (got.boundary_gap < 1e-3) continue;
    ParamBlock z("z", raw, LearningGroup::adapter);
    z.zero_grad();
    accumulate(z.grad, l2_normalize_rows_backward(got.grad, raw));
    ParamBlock* ps[] = {&z};
    auto fd = finite_difference_check([&] { return ms_loss(unit_rows(z.value), y).loss; }, ps, 1e-5,
                                      testing_support::scaled_fd_floor(ps, got.loss));
    CHECK_MESSAGE(fd.max_relative_error < 1e-5, "seed ", seed, " idx ", fd.worst_index);
    ++fd_checked;
  }
  CHECK(fd_checked >= 20);
}

TEST_CASE("ms_loss invariances") {
  Rng rng(42);
  const std::size_t B = 10, d = 6;
  const Tensor X = unit_rows(random_tensor({B, d}, rng));
  std::vector<std::size_t> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 2};
  const auto base = ms_loss(X, y);

  std::vector<std::size_t> perm(B);
  for (std::size_t i = 0; i < B; ++i) perm[i] = i;
  rng.shuffle(perm);
  Tensor Xp({B, d});
  std::vector<std::size_t> yp(B);
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(X.data() + perm[i] * d, d, Xp.data() + i * d);
    yp[i] = y[perm[i]];
  }
  const auto permuted = ms_loss(Xp, yp);
  CHECK(permuted.loss == doctest::Approx(base.loss).epsilon(1e-13));
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < d; ++k)
      CHECK(std::abs(permuted.grad[i * d + k] - base.grad[perm[i] * d + k]) < 1e-12);

  // Random orthogonal map by Gram-Schmidt.
  Tensor Q = random_tensor({d, d}, rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += Q[i * d + k] * Q[j * d + k];
      for (std::size_t k = 0; k < d; ++k) Q[i * d + k] -= dot * Q[j * d + k];
    }
    double n = 0.0;
    for (std::size_t k = 0; k < d; ++k) n += Q[i * d + k] * Q[i * d + k];
    for (std::size_t k = 0; k < d; ++k) Q[i * d + k] /= std::sqrt(n);
  }
  Tensor XR = linear(X, Q, Tensor({d}));
  CHECK(ms_loss(XR, y).loss == doctest::Approx(base.loss).epsilon(1e-12));
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_at_epoch(c, LearningGroup::adapter, 0) == 1e-3);
  CHECK(lr_at_epoch(c, LearningGroup::adapter, 19) == 1e-3);
  CHECK(lr_at_epoch(c, LearningGroup::adapter, 20) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(lr_at_epoch(c, LearningGroup::adapter, 40) == doctest::Approx(1e-5).epsilon(1e-15));
  CHECK(lr_at_epoch(c, LearningGroup::vfs, 0) == 1e-4);
  CHECK(lr_at_epoch(c, LearningGroup::vfs, 69) == doctest::Approx(1e-6).epsilon(1e-15));
  TrainConfig bad;
  bad.milestones = {40, 20};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.milestones = {20};
  bad.classes_per_batch = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("sgd_momentum_step") {
  TrainConfig c;
  c.momentum = 0.9;
  c.weight_decay = 0.0;
  OptimizerState st{0, 0.1, 0.01};

  ParamBlock still("still", Tensor({3}, 2.0), LearningGroup::adapter);
  ParamBlock* one[] = {&still};
  sgd_momentum_step(one, st, c);
  CHECK(still.value == Tensor({3}, 2.0));

  // Two hand-traced steps on a scalar: grad 1 then grad -2.
  ParamBlock s("s", Tensor({1}, 1.0), LearningGroup::adapter);
  ParamBlock* ps[] = {&s};
  s.grad[0] = 1.0;
  sgd_momentum_step(ps, st, c);
  double buf = 1.0, v = 1.0 - 0.1 * buf;
  CHECK(s.value[0] == v);
  CHECK(s.grad[0] == 0.0);
  s.grad[0] = -2.0;
  sgd_momentum_step(ps, st, c);
  buf = 0.9 * buf - 2.0;
  v -= 0.1 * buf;
  CHECK(s.value[0] == v);

  // Decay only.
  c.weight_decay = 5e-4;
  ParamBlock w("w", Tensor({2}, 3.0), LearningGroup::vfs);
  ParamBlock e("vfs.eps", Tensor({1}, 3.0), LearningGroup::vfs, false);
  ParamBlock* pw[] = {&w, &e};
  sgd_momentum_step(pw, st, c);
  CHECK(w.value[0] == doctest::Approx(3.0 * (1 - 0.01 * 5e-4)).epsilon(1e-15));
  CHECK(e.value[0] == 3.0);

  // lr = 0 changes no value.
  ParamBlock z("z", Tensor({2}, 1.5), LearningGroup::adapter);
  z.grad.fill(4.0);
  ParamBlock* pz[] = {&z};
  sgd_momentum_step(pz, OptimizerState{0, 0.0, 0.0}, c);
  CHECK(z.value == Tensor({2}, 1.5));

  // A non-finite gradient names the parameter and leaves everything untouched.
  ParamBlock good("good", Tensor({1}, 1.0), LearningGroup::adapter);
  ParamBlock bad("cam.block0.conv.weight", Tensor({2}, 1.0), LearningGroup::adapter);
  good.grad[0] = 1.0;
  bad.grad[1] = std::nan("");
  ParamBlock* pb[] = {&good, &bad};
  try {
    sgd_momentum_step(pb, st, c);
    FAIL("expected numeric error");
  } catch (const Error& err) {
    CHECK(err.kind() == ErrorKind::numeric);
    CHECK(std::string(err.what()).find("cam.block0.conv.weight") != std::string::npos);
  }
  CHECK(good.value[0] == 1.0);
}

TEST_CASE("PK sampling and few-shot index") {
  const Dataset ds = generate_synthetic_dataset(testing_support::small_spec());
  const TrainIndex index = build_train_index(ds.manifest, std::nullopt, 0);
  CHECK(index.classes.size() == 4);
  CHECK(index.size() == 40);

  Rng a(9), b(9);
  for (int i = 0; i < 20; ++i) {
    auto batch = pk_sample_batch(index, 2, 4, a);
    CHECK(batch == pk_sample_batch(index, 2, 4, b));
    REQUIRE(batch.size() == 8);
    std::map<std::size_t, int> counts;
    for (std::size_t o : batch) ++counts[ds.manifest.objects[o].label];
    CHECK(counts.size() == 2);
    for (auto [label, n] : counts) CHECK(n == 4);
    CHECK(std::set<std::size_t>(batch.begin(), batch.end()).size() == 8);
  }

  const TrainIndex tiny = build_train_index(ds.manifest, 2, 3);
  CHECK(tiny.size() == 8);
  CHECK(build_train_index(ds.manifest, 2, 3).members == tiny.members);
  for (std::size_t c = 0; c < tiny.classes.size(); ++c)
    for (std::size_t o : tiny.members[c])
      CHECK(std::find(index.members[c].begin(), index.members[c].end(), o) != index.members[c].end());
  Rng r(1);
  auto batch = pk_sample_batch(tiny, 2, 4, r);
  CHECK(batch.size() == 8);
  CHECK(std::set<std::size_t>(batch.begin(), batch.end()).size() == 4);  // duplicates fill

  CHECK_THROWS_AS(pk_sample_batch(index, 5, 4, r), Error);
}

TEST_CASE("MLP baseline adapter") {
  Rng rng(1);
  auto big = init_mlp_parameters(768, rng);
  CHECK(big.w1.value.shape() == Shape{192, 768});
  CHECK(big.w2.value.shape() == Shape{192, 192});
  CHECK(big.w3.value.shape() == Shape{768, 192});

  // lambda = 1 is the pooled feature.
  Tensor views = random_tensor({3, 5, 768}, rng);
  auto out = mlp_forward(views, 1.0, true, big);
  CHECK(max_abs_diff(out.descriptors, mean_pool_batch(views, true)) < 1e-15);

  std::size_t checked = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng r(200 + trial);
    const std::size_t B = 1 + r.index(4), M = 1 + r.index(5), d = 4 + r.index(9);
    auto p = init_mlp_parameters(d, r);
    const double lambda = r.uniform();
    const bool normalize = trial % 2 == 0;
    ParamBlock x("x", random_tensor({B, M, d}, r), LearningGroup::adapter);
    const Tensor proj = random_tensor({B, d}, r);
    for (auto* q : p.params()) q->zero_grad();
    x.zero_grad();
    auto fwd = mlp_forward(x.value, lambda, normalize, p);
    accumulate(x.grad, mlp_backward(proj, fwd.cache, M, lambda, normalize, p));
    std::vector<ParamBlock*> ps = p.params();
    ps.push_back(&x);
    auto res = finite_difference_check(
        [&] { return project(mlp_forward(x.value, lambda, normalize, p).descriptors, proj); }, ps);
    CHECK_MESSAGE(res.max_relative_error < 1e-5, "trial ", trial, " ", res.worst_param);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("joint CAM + VFS objective gradients") {
  const Dataset ds = generate_synthetic_dataset(testing_support::small_spec());
  std::size_t checked = 0;
  for (std::uint64_t trial = 0; trial < 60 && checked < 24; ++trial) {
    CamConfig cc;
    cc.dino_dim = ds.manifest.dino_dim;
    cc.chunk_size = 2 + trial % 2;
    cc.lambda = 0.2 + 0.1 * static_cast<double>(trial % 5);
    VfsConfig vc;
    vc.E = 3 + trial % 4;
    vc.mode = trial % 3 == 0 ? SelectionMode::top_e : SelectionMode::random_e;
    TrainConfig tc;
    tc.seed = trial;
    Model model = init_model(AdapterKind::cam, cc, ds.manifest.clip_dim, vc, trial);
    Rng perturb(trial + 500);
    for (auto& b : model.cam.blocks) {
      for (auto& v : b.gamma.value.storage()) v = 0.5 + perturb.uniform();
      for (auto& v : b.beta.value.storage()) v = 0.3 * perturb.normal();
    }
    model.vfs->eps.value[0] = 0.5 + perturb.uniform();
    model.vfs->alpha.value[0] = 0.3 + perturb.uniform();

    TrainingProblem problem(ds, model, tc, vc);
    Rng batch_rng(trial);
    const auto batch = pk_sample_batch(problem.index(), 2, 4, batch_rng);
    const auto selected = problem.epoch_selection(trial);
    auto params = model.params();
    for (auto* p : params) p->zero_grad();
    const StepLoss at = problem.step(batch, selected, 77 + trial, true, false);
    if (at.boundary_gap < 1e-3 || at.kink_gap < 1e-4) continue;

    std::vector<ParamBlock*> checked_params;
    for (auto* p : params) {
      if (is_conv_bias(p)) {
        for (double g : p->grad.storage()) CHECK(std::abs(g) < 1e-12);
      } else {
        checked_params.push_back(p);
      }
    }
    auto r = finite_difference_check(
        [&] { return problem.step(batch, selected, 77 + trial, false, false).total; }, checked_params,
        1e-5, testing_support::scaled_fd_floor(checked_params, at.total));
    CHECK_MESSAGE(r.max_relative_error < 1e-5, "trial ", trial, " ", r.worst_param, "[",
                  r.worst_index, "] a=", r.worst_analytic, " n=", r.worst_numeric);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("fit: no-op, determinism, loss trend, fallback") {
  const Dataset ds = generate_synthetic_dataset(testing_support::small_spec());
  CamConfig cc;
  cc.dino_dim = ds.manifest.dino_dim;
  VfsConfig vc;
  vc.E = 5;
  TrainConfig tc;
  tc.seed = 3;

  tc.epochs = 0;
  auto none = fit(ds, AdapterKind::cam, cc, tc, vc);
  CHECK(none.log.empty());
  CHECK(same_values(none.model, init_model(AdapterKind::cam, cc, ds.manifest.clip_dim, vc, 3)));
  CamConfig endpoint = cc;
  endpoint.lambda = 1.0;
  auto none1 = fit(ds, AdapterKind::cam, endpoint, tc, vc);
  CHECK(evaluate_retrieval(describe(none1.model, ds.dino), ds.manifest).map ==
        doctest::Approx(evaluate_retrieval(mean_pool_descriptors(ds), ds.manifest).map).epsilon(1e-12));
  auto mlp_none = fit(ds, AdapterKind::mlp, endpoint, tc, vc);
  CHECK(max_abs_diff(describe(mlp_none.model, ds.dino), mean_pool_descriptors(ds)) < 1e-15);

  tc.epochs = 11;
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  auto a = fit(ds, AdapterKind::cam, cc, tc, vc);
  omp_set_num_threads(std::max(threads, 3));
  auto b = fit(ds, AdapterKind::cam, cc, tc, vc);
  omp_set_num_threads(threads);
  CHECK(a.vfs_used);
  CHECK(same_values(a.model, b.model));
  CHECK(serialize_training_log(a.log) == serialize_training_log(b.log));
  REQUIRE(a.log.size() == 11);
  CHECK(a.log[10].mean_loss < a.log[0].mean_loss);
  CHECK(a.log[0].lr_adapter == 1e-3);
  CHECK(a.log[0].lr_vfs == 1e-4);

  tc.seed = 4;
  auto c = fit(ds, AdapterKind::cam, cc, tc, vc);
  CHECK_FALSE(same_values(a.model, c.model));

  // Without clip features the fit falls back to the adapter alone.
  Dataset bare = ds;
  bare.clip.reset();
  tc.epochs = 1;
  auto fb = fit(bare, AdapterKind::cam, cc, tc, vc);
  CHECK_FALSE(fb.vfs_used);
  CHECK_FALSE(fb.model.vfs.has_value());
  CHECK(fb.warnings.size() == 1);
  Model m = init_model(AdapterKind::cam, cc, ds.manifest.clip_dim, vc, 0);
  CHECK_THROWS_AS(TrainingProblem(bare, m, tc, vc), Error);

  // VFS off leaves the adapter initialization unchanged.
  TrainConfig off = tc;
  off.seed = 3;
  off.vfs_enabled = false;
  off.epochs = 0;
  auto plain = fit(ds, AdapterKind::cam, cc, off, vc);
  CHECK(plain.model.cam.blocks[0].weight.value == none.model.cam.blocks[0].weight.value);
}

TEST_CASE("lexicon restriction") {
  const Dataset ds = generate_synthetic_dataset(testing_support::small_spec());
  CamConfig cc;
  cc.dino_dim = ds.manifest.dino_dim;
  TrainConfig tc;
  VfsConfig vc;
  vc.E = 2;
  vc.lexicon = {ds.manifest.lexicon_names[3], ds.manifest.lexicon_names[7], "CONCEPT_011"};
  Model m = init_model(AdapterKind::cam, cc, ds.manifest.clip_dim, vc, 0);
  TrainingProblem p(ds, m, tc, vc);
  REQUIRE(p.label_space() != nullptr);
  CHECK(p.label_space()->new_names.size() == 3);
  vc.lexicon = {"no such concept"};
  CHECK_THROWS_AS(TrainingProblem(ds, m, tc, vc), Error);
}

TEST_CASE("training log format") {
  std::vector<EpochLog> log{{0, 0.5, 1e-3, 1e-4}, {1, 0.25, 1e-3, 1e-4}};
  const std::string text = serialize_training_log(log);
  CHECK(text ==
        "{\"epoch\":0,\"mean_loss\":0.5,\"lr_adapter\":0.001,\"lr_vfs\":0.0001}\n"
        "{\"epoch\":1,\"mean_loss\":0.25,\"lr_adapter\":0.001,\"lr_vfs\":0.0001}\n");
}

TEST_CASE("parameter files round-trip") {
  const Dataset ds = generate_synthetic_dataset(testing_support::small_spec());
  testing_support::TempDir dir;
  for (auto kind : {AdapterKind::cam, AdapterKind::mlp}) {
    CamConfig cc;
    cc.dino_dim = ds.manifest.dino_dim;
    cc.num_cbr_blocks = 2;
    cc.lambda = 0.4;
    TrainConfig tc;
    tc.epochs = 1;
    VfsConfig vc;
    vc.E = 4;
    auto r = fit(ds, kind, cc, tc, vc);
    const auto path = dir / std::string(to_string(kind));
    save_model(r.model, path, R"({"config_hash": "00000000000000ab"})");
    Model back = load_model(path);
    CHECK(back.adapter == kind);
    CHECK(back.cam_config.lambda == 0.4);
    CHECK(back.cam_config.num_cbr_blocks == 2);
    CHECK(same_values(back, r.model));
    CHECK(describe(back, ds.dino) == describe(r.model, ds.dino));
    save_model(back, dir / "again", R"({"config_hash": "00000000000000ab"})");
    CHECK(testing_support::read_bytes(path / "params.f64le") ==
          testing_support::read_bytes(dir / "again" / "params.f64le"));
    CHECK(testing_support::read_bytes(path / "params.json") ==
          testing_support::read_bytes(dir / "again" / "params.json"));
  }
  {
    std::string bytes = testing_support::read_bytes(dir / "cam" / "params.f64le");
    bytes[5] ^= 1;
    std::ofstream(dir / "cam" / "params.f64le", std::ios::binary) << bytes;
  }
  try {
    load_model(dir / "cam");
    FAIL("expected format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
  }
  try {
    load_model(dir / "missing");
    FAIL("expected io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
  }
}
