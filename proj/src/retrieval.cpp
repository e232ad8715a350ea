#include "mvret/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"
#include "mvret/cam.hpp"
#include "mvret/error.hpp"

namespace mvret {

RankedList rank_targets(std::span<const double> query, const Tensor& targets,
                        std::span<const std::size_t> target_labels, std::size_t query_label,
                        std::size_t query_index) {
  require_rank(targets, 2, "rank_targets targets");
  const std::size_t T = targets.dim(0), d = targets.dim(1);
  require(query.size() == d, ErrorKind::shape, "rank_targets: query and target dims differ");
  require(target_labels.size() == T, ErrorKind::shape, "rank_targets: one label per target");

  double qn = 0.0;
  for (double v : query) qn += v * v;
  qn = std::sqrt(qn);
  std::vector<double> sim(T, 0.0);
  std::vector<bool> zero(T, false);
  for (std::size_t t = 0; t < T; ++t) {
    double dot = 0.0, tn = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      dot += query[k] * targets[t * d + k];
      tn += targets[t * d + k] * targets[t * d + k];
    }
    zero[t] = tn == 0.0;
    if (!zero[t] && qn > 0.0) sim[t] = dot / (qn * std::sqrt(tn));
  }

  RankedList out;
  out.query = query_index;
  out.order.resize(T);
  std::iota(out.order.begin(), out.order.end(), 0);
  std::sort(out.order.begin(), out.order.end(), [&](std::size_t a, std::size_t b) {
    if (zero[a] != zero[b]) return !zero[a];
    if (sim[a] != sim[b]) return sim[a] > sim[b];
    return a < b;
  });
  out.relevant.resize(T);
  for (std::size_t r = 0; r < T; ++r) {
    out.relevant[r] = target_labels[out.order[r]] == query_label;
    out.ng += out.relevant[r];
  }
  return out;
}

std::optional<double> average_precision(const RankedList& ranked) {
  if (ranked.ng == 0) return std::nullopt;
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranked.relevant.size(); ++r)
    if (ranked.relevant[r]) sum += static_cast<double>(++hits) / static_cast<double>(r + 1);
  return sum / static_cast<double>(ranked.ng);
}

std::optional<double> ndcg(const RankedList& ranked) {
  if (ranked.ng == 0) return std::nullopt;
  double dcg = 0.0, ideal = 0.0;
  for (std::size_t r = 0; r < ranked.relevant.size(); ++r)
    if (ranked.relevant[r]) dcg += 1.0 / std::log2(static_cast<double>(r + 2));
  for (std::size_t r = 0; r < ranked.ng; ++r) ideal += 1.0 / std::log2(static_cast<double>(r + 2));
  return dcg / ideal;
}

std::optional<double> recall_at_k(const RankedList& ranked, std::size_t k) {
  if (ranked.ng == 0) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < std::min(k, ranked.relevant.size()); ++r) hits += ranked.relevant[r];
  return static_cast<double>(hits) / static_cast<double>(ranked.ng);
}

std::string_view to_string(AnmrrVariant variant) {
  return variant == AnmrrVariant::gtm ? "gtm" : "2ng";
}

AnmrrVariant parse_anmrr_variant(std::string_view text) {
  if (text == "gtm") return AnmrrVariant::gtm;
  if (text == "2ng") return AnmrrVariant::two_ng;
  fail(ErrorKind::config, "unknown ANMRR variant '" + std::string(text) + "' (gtm|2ng)");
}

std::optional<double> nmrr(const RankedList& ranked, std::size_t gtm, AnmrrVariant variant) {
  if (ranked.ng == 0) return std::nullopt;
  const double ng = static_cast<double>(ranked.ng);
  const double K = variant == AnmrrVariant::gtm
                       ? static_cast<double>(std::min(4 * ranked.ng, 2 * gtm))
                       : 2.0 * ng;
  double sum = 0.0;
  for (std::size_t r = 0; r < ranked.relevant.size(); ++r) {
    if (!ranked.relevant[r]) continue;
    const double rank = static_cast<double>(r + 1);
    sum += rank <= K ? rank : 1.25 * K;
  }
  const double avr = sum / ng;
  const double mrr = avr - 0.5 - ng / 2.0;
  return mrr / (1.25 * K - 0.5 - ng / 2.0);
}

AnmrrResult anmrr(std::span<const RankedList> lists, AnmrrVariant variant) {
  std::size_t gtm = 0;
  for (const auto& l : lists) gtm = std::max(gtm, l.ng);
  AnmrrResult out;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& l : lists) {
    out.per_query.push_back(nmrr(l, gtm, variant));
    if (out.per_query.back()) {
      sum += *out.per_query.back();
      ++n;
    }
  }
  out.anmrr = n ? sum / static_cast<double>(n) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------

MetricsReport evaluate_retrieval(const Tensor& descriptors, const DatasetManifest& manifest,
                                 const EvalOptions& options) {
  require_rank(descriptors, 2, "evaluate_retrieval descriptors");
  require(descriptors.dim(0) == manifest.objects.size(), ErrorKind::shape,
          "evaluate_retrieval: one descriptor per object");
  const auto queries = split_indices(manifest, Split::query);
  const auto targets = split_indices(manifest, Split::target);
  require(!queries.empty(), ErrorKind::validation, "evaluate_retrieval: empty query split");
  require(!targets.empty(), ErrorKind::validation, "evaluate_retrieval: empty target split");
  const std::size_t d = descriptors.dim(1);
  const Tensor target_desc = gather_rows(descriptors, targets);
  const auto target_labels = object_labels(manifest, targets);

  std::vector<RankedList> lists(queries.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t qi = 0; qi < static_cast<std::ptrdiff_t>(queries.size()); ++qi) {
    const std::size_t q = queries[static_cast<std::size_t>(qi)];
    lists[static_cast<std::size_t>(qi)] =
        rank_targets({descriptors.data() + q * d, d}, target_desc, target_labels,
                     manifest.objects[q].label, q);
  }

  MetricsReport report;
  report.anmrr_variant = options.anmrr_variant;
  report.config_hash = options.config_hash;
  report.dataset_hash = dataset_hash(manifest);
  report.seed = options.seed;
  report.recall_k = options.recall_k;
  const AnmrrResult an = anmrr(lists, options.anmrr_variant);
  double sum_ap = 0.0, sum_ndcg = 0.0, sum_nmrr = 0.0, sum_recall = 0.0;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const auto ap = average_precision(lists[i]);
    if (!ap) {
      ++report.excluded_queries;
      continue;
    }
    QueryMetrics qm;
    qm.query_id = manifest.objects[queries[i]].id;
    qm.ap = *ap;
    qm.ndcg = *ndcg(lists[i]);
    qm.nmrr = *an.per_query[i];
    if (options.recall_k) qm.recall = *recall_at_k(lists[i], *options.recall_k);
    sum_ap += qm.ap;
    sum_ndcg += qm.ndcg;
    sum_nmrr += qm.nmrr;
    if (qm.recall) sum_recall += *qm.recall;
    report.per_query.push_back(std::move(qm));
  }
  report.num_queries = report.per_query.size();
  if (report.num_queries > 0) {
    const double n = static_cast<double>(report.num_queries);
    report.map = sum_ap / n;
    report.ndcg = sum_ndcg / n;
    report.anmrr = sum_nmrr / n;
    if (options.recall_k) report.recall = sum_recall / n;
  }
  for (std::size_t i = 0; i < manifest.objects.size(); ++i) {
    bool zero = true;
    for (std::size_t k = 0; k < d && zero; ++k) zero = descriptors[i * d + k] == 0.0;
    if (zero) report.zero_descriptors.push_back(manifest.objects[i].id);
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s(buf);
  return s == "-0.000000" ? "0.000000" : s;
}

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace

std::string serialize_metrics_report(const MetricsReport& r) {
  std::string out = "{\n";
  auto field = [&](const std::string& key, const std::string& value, bool last = false) {
    out += "  " + quoted(key) + ": " + value + (last ? "\n" : ",\n");
  };
  field("map", fixed6(r.map));
  field("ndcg", fixed6(r.ndcg));
  field("anmrr", fixed6(r.anmrr));
  field("anmrr_variant", quoted(std::string(to_string(r.anmrr_variant))));
  if (r.recall_k) {
    field("recall_k", std::to_string(*r.recall_k));
    field("recall", fixed6(r.recall.value_or(0.0)));
  }
  field("num_queries", std::to_string(r.num_queries));
  field("excluded_queries", std::to_string(r.excluded_queries));
  std::string zeros = "[";
  for (std::size_t i = 0; i < r.zero_descriptors.size(); ++i)
    zeros += (i ? ", " : "") + quoted(r.zero_descriptors[i]);
  field("zero_descriptors", zeros + "]");
  field("config_hash", quoted(checksum_to_hex(r.config_hash)));
  field("dataset_hash", quoted(checksum_to_hex(r.dataset_hash)));
  field("seed", std::to_string(r.seed));
  std::string pq = "[";
  for (std::size_t i = 0; i < r.per_query.size(); ++i) {
    const auto& q = r.per_query[i];
    pq += std::string(i ? "," : "") + "\n    {\"query\": " + quoted(q.query_id) +
          ", \"ap\": " + fixed6(q.ap) + ", \"ndcg\": " + fixed6(q.ndcg) +
          ", \"nmrr\": " + fixed6(q.nmrr);
    if (q.recall) pq += ", \"recall\": " + fixed6(*q.recall);
    pq += "}";
  }
  pq += r.per_query.empty() ? "]" : "\n  ]";
  field("per_query", pq, true);
  return out + "}\n";
}

MetricsReport parse_metrics_report(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.map = j.at("map").get<double>();
    r.ndcg = j.at("ndcg").get<double>();
    r.anmrr = j.at("anmrr").get<double>();
    r.anmrr_variant = parse_anmrr_variant(j.at("anmrr_variant").get<std::string>());
    if (j.contains("recall_k")) {
      r.recall_k = j.at("recall_k").get<std::size_t>();
      r.recall = j.at("recall").get<double>();
    }
    r.num_queries = j.at("num_queries").get<std::size_t>();
    r.excluded_queries = j.at("excluded_queries").get<std::size_t>();
    r.zero_descriptors = j.at("zero_descriptors").get<std::vector<std::string>>();
    r.config_hash = checksum_from_hex(j.at("config_hash").get<std::string>());
    r.dataset_hash = checksum_from_hex(j.at("dataset_hash").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& q : j.at("per_query")) {
      QueryMetrics m;
      m.query_id = q.at("query").get<std::string>();
      m.ap = q.at("ap").get<double>();
      m.ndcg = q.at("ndcg").get<double>();
      m.nmrr = q.at("nmrr").get<double>();
      if (q.contains("recall")) m.recall = q.at("recall").get<double>();
      r.per_query.push_back(std::move(m));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "metrics report: " + std::string(e.what()));
  }
}

Tensor mean_pool_descriptors(const Dataset& dataset) {
  return mean_pool_batch(dataset.dino, true);
}

}  // namespace mvret
