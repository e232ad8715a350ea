#include <cmath>
#include <omp.h>

#include "doctest.h"
#include "fixtures.hpp"
#include "mvret/error.hpp"
#include "mvret/retrieval.hpp"
#include "oracles/naive_metrics.hpp"
#include "support.hpp"

using namespace mvret;
using testing_support::random_tensor;

namespace {

RankedList from_flags(const std::vector<int>& rel) {
  RankedList r;
  for (std::size_t i = 0; i < rel.size(); ++i) {
    r.order.push_back(i);
    r.relevant.push_back(rel[i] != 0);
    r.ng += rel[i] != 0;
  }
  return r;
}

// Queries and targets from explicit labels; descriptors filled by the caller.
DatasetManifest manifest_for(const std::vector<std::size_t>& query_labels,
                             const std::vector<std::size_t>& target_labels, std::size_t classes) {
  DatasetManifest m;
  m.dataset_name = "metrics";
  m.views_per_object = 1;
  for (std::size_t c = 0; c < classes; ++c) m.label_names.push_back("c" + std::to_string(c));
  std::size_t n = 0;
  for (std::size_t y : query_labels) m.objects.push_back({"q" + std::to_string(n++), y, Split::query});
  for (std::size_t y : target_labels) m.objects.push_back({"t" + std::to_string(n++), y, Split::target});
  m.num_objects = m.objects.size();
  return m;
}

}  // namespace

TEST_CASE("ranking") {
  Tensor targets({4, 2}, std::vector<double>{1, 0, 0, 1, -1, 0, 0.6, 0.8});
  std::vector<std::size_t> labels{0, 1, 0, 1};
  std::vector<double> q{0, 2};
  auto r = rank_targets(q, targets, labels, 1);
  CHECK(r.order == std::vector<std::size_t>{1, 3, 0, 2});
  CHECK(r.ng == 2);
  CHECK(r.relevant == std::vector<bool>{true, true, false, false});

  Tensor same({5, 3}, 1.0);
  std::vector<std::size_t> l5{0, 0, 0, 0, 0};
  std::vector<double> any{0.3, -2, 5};
  CHECK(rank_targets(any, same, l5, 0).order == std::vector<std::size_t>{0, 1, 2, 3, 4});

  // Zero targets go last even behind negative similarities.
  Tensor withzero({3, 2}, std::vector<double>{0, 0, -1, 0, 1, 0});
  std::vector<std::size_t> l3{0, 0, 0};
  std::vector<double> q1{1, 0};
  CHECK(rank_targets(q1, withzero, l3, 0).order == std::vector<std::size_t>{2, 1, 0});

  // Random case against a plain sort.
  Rng rng(4);
  Tensor t = random_tensor({10, 5}, rng);
  std::vector<double> qq(5);
  for (auto& v : qq) v = rng.normal();
  std::vector<std::size_t> lab(10, 0);
  auto got = rank_targets(qq, t, lab, 0);
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t i = 0; i < 10; ++i) {
    double dot = 0, nq = 0, nt = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      dot += qq[k] * t[i * 5 + k];
      nq += qq[k] * qq[k];
      nt += t[i * 5 + k] * t[i * 5 + k];
    }
    keyed.push_back({-dot / std::sqrt(nq * nt), i});
  }
  std::sort(keyed.begin(), keyed.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(got.order[i] == keyed[i].second);
}

TEST_CASE("hand-traced metric values") {
  const auto r = from_flags({1, 0, 1, 0});
  CHECK(*average_precision(r) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(std::abs(*ndcg(r) - 1.5 / (1.0 + 1.0 / std::log2(3.0))) < 1e-15);
  CHECK(std::abs(*ndcg(r) - 0.91972) < 5e-6);
  CHECK(std::abs(*nmrr(r, 2, AnmrrVariant::gtm) - 1.0 / 7.0) < 1e-15);

  CHECK(*average_precision(from_flags({1, 1, 1, 0, 0})) == 1.0);
  CHECK(*ndcg(from_flags({1, 1, 0})) == 1.0);
  CHECK(*nmrr(from_flags({1, 1, 1, 0}), 3, AnmrrVariant::gtm) == 0.0);
  CHECK(*average_precision(from_flags({0, 0, 0, 0, 0, 0, 1})) == doctest::Approx(1.0 / 7.0));
  // All relevant beyond K = min(4, 2 * 1) = 2.
  CHECK(*nmrr(from_flags({0, 0, 0, 1}), 1, AnmrrVariant::gtm) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_FALSE(average_precision(from_flags({0, 0})).has_value());
  CHECK_FALSE(ndcg(from_flags({0, 0})).has_value());

  double prev = 2.0;
  for (std::size_t n = 1; n < 30; ++n) {
    std::vector<int> flags(n, 0);
    flags.back() = 1;
    const double v = *ndcg(from_flags(flags));
    CHECK(v < prev);
    prev = v;
  }

  CHECK(*recall_at_k(r, 1) == 0.5);
  CHECK(*recall_at_k(r, 3) == 1.0);
}

TEST_CASE("metrics agree with the brute-force oracle") {
  Rng rng(2024);
  for (int c = 0; c < 200; ++c) {
    const std::size_t n_lists = 1 + rng.index(5);
    std::vector<RankedList> lists;
    std::vector<std::vector<int>> flags;
    for (std::size_t l = 0; l < n_lists; ++l) {
      const std::size_t n = 1 + rng.index(50);
      const std::size_t ng = rng.index(std::min<std::size_t>(10, n) + 1);
      std::vector<int> f(n, 0);
      for (std::size_t i : rng.sample_without_replacement(n, ng)) f[i] = 1;
      flags.push_back(f);
      lists.push_back(from_flags(f));
    }
    int gtm = 0;
    for (const auto& f : flags) gtm = std::max(gtm, int(std::count(f.begin(), f.end(), 1)));
    const auto an = anmrr(lists, AnmrrVariant::gtm);
    const auto an2 = anmrr(lists, AnmrrVariant::two_ng);
    for (std::size_t l = 0; l < n_lists; ++l) {
      const auto& f = flags[l];
      const int ng = int(std::count(f.begin(), f.end(), 1));
      const auto ap = oracle::ap(f);
      REQUIRE(ap.has_value() == average_precision(lists[l]).has_value());
      if (!ap) {
        CHECK_FALSE(an.per_query[l].has_value());
        continue;
      }
      CHECK(std::abs(*ap - *average_precision(lists[l])) <= 1e-12);
      CHECK(std::abs(*oracle::ndcg(f) - *ndcg(lists[l])) <= 1e-12);
      CHECK(std::abs(*oracle::nmrr(f, oracle::anmrr_window_gtm(ng, gtm)) - *an.per_query[l]) <= 1e-12);
      CHECK(std::abs(*oracle::nmrr(f, 2.0 * ng) - *an2.per_query[l]) <= 1e-12);
      for (double v : {*ap, *ndcg(lists[l]), *an.per_query[l]}) {
        CHECK(v >= -1e-15);
        CHECK(v <= 1.0 + 1e-15);
      }
    }
  }
}

TEST_CASE("swapping a relevant item upward never hurts") {
  Rng rng(8);
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = 2 + rng.index(30);
    std::vector<int> f(n, 0);
    for (std::size_t i = 0; i < n; ++i) f[i] = rng.uniform() < 0.3;
    std::size_t pos = 1 + rng.index(n - 1);
    if (!f[pos] || f[pos - 1]) continue;
    std::vector<int> g = f;
    std::swap(g[pos], g[pos - 1]);
    const int ng = int(std::count(f.begin(), f.end(), 1));
    CHECK(*average_precision(from_flags(g)) >= *average_precision(from_flags(f)));
    CHECK(*ndcg(from_flags(g)) >= *ndcg(from_flags(f)));
    CHECK(*nmrr(from_flags(g), ng, AnmrrVariant::gtm) <= *nmrr(from_flags(f), ng, AnmrrVariant::gtm));
  }
}

TEST_CASE("evaluate_retrieval") {
  // Targets are copies of the queries' class vectors: a perfect embedding.
  const std::vector<std::size_t> ql{0, 1, 2}, tl{0, 0, 1, 1, 2, 2};
  auto m = manifest_for(ql, tl, 3);
  Tensor desc({9, 3});
  for (std::size_t i = 0; i < 9; ++i) desc[i * 3 + m.objects[i].label] = 1.0;
  auto rep = evaluate_retrieval(desc, m);
  CHECK(rep.map == 1.0);
  CHECK(rep.ndcg == 1.0);
  CHECK(rep.anmrr == 0.0);
  CHECK(rep.num_queries == 3);

  // Scaling descriptors leaves everything unchanged.
  Rng rng(3);
  Tensor noisy = random_tensor({9, 3}, rng);
  Tensor scaled = noisy;
  for (auto& v : scaled.storage()) v *= 7.25;
  CHECK(serialize_metrics_report(evaluate_retrieval(noisy, m)) ==
        serialize_metrics_report(evaluate_retrieval(scaled, m)));

  // Unanswerable queries are excluded, zero descriptors flagged.
  auto m2 = manifest_for({0, 3}, tl, 4);
  Tensor d2 = random_tensor({8, 3}, rng);
  for (std::size_t k = 0; k < 3; ++k) d2[2 * 3 + k] = 0.0;
  auto rep2 = evaluate_retrieval(d2, m2);
  CHECK(rep2.num_queries == 1);
  CHECK(rep2.excluded_queries == 1);
  CHECK(rep2.zero_descriptors == std::vector<std::string>{"t2"});

  auto empty = manifest_for({}, tl, 3);
  CHECK_THROWS_AS(evaluate_retrieval(Tensor({6, 3}), empty), Error);
}

TEST_CASE("random descriptors score near the class prior") {
  std::vector<std::size_t> ql, tl;
  for (std::size_t i = 0; i < 400; ++i) ql.push_back(i % 2);
  for (std::size_t i = 0; i < 200; ++i) tl.push_back(i % 2);
  auto m = manifest_for(ql, tl, 2);
  Rng rng(77);
  auto rep = evaluate_retrieval(random_tensor({600, 16}, rng), m);
  // Per-query AP of a random ranking has sd < 0.05 here; the mean of 400 is far tighter.
  CHECK(std::abs(rep.map - 0.5) < 0.02);
}

TEST_CASE("report serialization and parallel independence") {
  const Dataset ds = generate_synthetic_dataset(testing_support::small_spec());
  Tensor desc = mean_pool_descriptors(ds);
  EvalOptions opt;
  opt.config_hash = 0xabcdef;
  opt.seed = 9;
  opt.recall_k = 5;
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  const std::string one = serialize_metrics_report(evaluate_retrieval(desc, ds.manifest, opt));
  omp_set_num_threads(std::max(threads, 4));
  const auto rep = evaluate_retrieval(desc, ds.manifest, opt);
  omp_set_num_threads(threads);
  const std::string many = serialize_metrics_report(rep);
  CHECK(one == many);
  CHECK(many.find("\"config_hash\": \"0000000000abcdef\"") != std::string::npos);
  CHECK(many.find("\"map\": ") < many.find("\"ndcg\": "));

  double sum = 0.0;
  for (const auto& q : rep.per_query) sum += q.ap;
  CHECK(std::abs(sum / rep.num_queries - rep.map) < 1e-12);

  const auto back = parse_metrics_report(many);
  CHECK(serialize_metrics_report(back) == many);
  CHECK(back.dataset_hash == dataset_hash(ds.manifest));
  CHECK_THROWS_AS(parse_metrics_report("{\"map\": 1"), Error);
}
