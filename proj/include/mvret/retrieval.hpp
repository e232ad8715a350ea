#pragma once

// Exact ranking and retrieval metrics: mAP, NDCG (full ranking, log2(k+1)
// discount) and ANMRR (MPEG-7 style, GTM-capped or 2*NG window).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvret/dataset.hpp"
#include "mvret/tensor.hpp"

namespace mvret {

struct RankedList {
  std::size_t query = 0;              // query object index
  std::vector<std::size_t> order;     // target positions, best first
  std::vector<bool> relevant;         // per rank
  std::size_t ng = 0;                 // relevant targets
};

/// Descending cosine similarity, exact ties by ascending target position,
/// zero-vector targets after every nonzero one.
RankedList rank_targets(std::span<const double> query, const Tensor& targets,
                        std::span<const std::size_t> target_labels, std::size_t query_label,
                        std::size_t query_index = 0);

/// nullopt when NG = 0 (the query is excluded from means).
std::optional<double> average_precision(const RankedList& ranked);
std::optional<double> ndcg(const RankedList& ranked);
/// Fraction of the NG relevant targets within the first k ranks.
std::optional<double> recall_at_k(const RankedList& ranked, std::size_t k);

enum class AnmrrVariant { gtm, two_ng };

std::string_view to_string(AnmrrVariant variant);
AnmrrVariant parse_anmrr_variant(std::string_view text);

/// NMRR with window K: min(4 NG, 2 GTM) for gtm, 2 NG for two_ng.
std::optional<double> nmrr(const RankedList& ranked, std::size_t gtm, AnmrrVariant variant);

struct AnmrrResult {
  double anmrr = 0.0;
  std::vector<std::optional<double>> per_query;
};

AnmrrResult anmrr(std::span<const RankedList> lists, AnmrrVariant variant = AnmrrVariant::gtm);

struct QueryMetrics {
  std::string query_id;
  double ap = 0.0;
  double ndcg = 0.0;
  double nmrr = 0.0;
  std::optional<double> recall;
};

struct MetricsReport {
  double map = 0.0;
  double ndcg = 0.0;
  double anmrr = 0.0;
  std::optional<std::size_t> recall_k;
  std::optional<double> recall;
  std::vector<QueryMetrics> per_query;  // in query order, NG = 0 queries dropped
  std::size_t num_queries = 0;
  std::size_t excluded_queries = 0;
  std::vector<std::string> zero_descriptors;  // object ids with an all-zero descriptor
  AnmrrVariant anmrr_variant = AnmrrVariant::gtm;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_hash = 0;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  AnmrrVariant anmrr_variant = AnmrrVariant::gtm;
  std::optional<std::size_t> recall_k;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

/// descriptors [N, d] indexed like manifest.objects. Every query is ranked
/// against the whole target split (in parallel; the result does not depend on
/// the thread count). Throws ErrorKind::validation on an empty split.
MetricsReport evaluate_retrieval(const Tensor& descriptors, const DatasetManifest& manifest,
                                 const EvalOptions& options = {});

/// Stable key order, 6 decimals, trailing newline; hashes as 16-digit hex.
std::string serialize_metrics_report(const MetricsReport& report);
/// Throws ErrorKind::format.
MetricsReport parse_metrics_report(std::string_view text);

/// Zero-shot descriptors: per-object view mean, L2-normalized.
Tensor mean_pool_descriptors(const Dataset& dataset);

}  // namespace mvret
