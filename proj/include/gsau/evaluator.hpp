#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gsau/dataset.hpp"

namespace gsau {

enum class Split { Validation, Test };

std::string to_string(Split split);
Split parse_split(const std::string& name);

/// One held-out target per user.
struct EvalQuery {
  std::size_t user = 0;
  std::vector<std::int32_t> history;   // input to the scoring head, oldest first
  std::int32_t target = -1;
  std::vector<std::int32_t> excluded;  // known positives removed from the ranking
};

/// Validation: history = train, excluded = train. Test: history = train +
/// validation item, excluded = both. The target itself is never excluded.
std::vector<EvalQuery> build_queries(const Dataset& dataset, Split split);

/// Candidate items by descending score, ties by ascending index, with the
/// excluded items removed.
std::vector<std::int32_t> rank_items(std::span<const double> scores,
                                     std::span<const std::int32_t> excluded);

/// 1-based rank of `target` under the same ordering as rank_items.
std::size_t target_rank(std::span<const double> scores, std::span<const std::int32_t> excluded,
                        std::int32_t target);

double recall_at_k(std::size_t rank, std::size_t k);
/// Single relevant item: 1 / log2(rank + 1) inside the top k, else 0.
double ndcg_at_k(std::size_t rank, std::size_t k);

struct MetricsReport {
  std::string split;
  long epoch = -1;
  std::vector<std::size_t> ks;
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
  std::size_t num_users = 0;
  std::map<std::string, std::string> metadata;
  std::vector<std::size_t> ranks;  // per query, not serialized

  /// One-line JSON record.
  std::string to_json_line() const;
  bool same_metrics(const MetricsReport& other) const;
};

/// Fills `scores` (users x M, row-major) for a chunk of users.
using ScoreFn = std::function<void(std::span<const std::size_t> users,
                                   const std::vector<std::vector<std::int32_t>>& histories,
                                   std::vector<double>& scores)>;

struct EvalOptions {
  std::vector<std::size_t> ks{10, 20, 50};
  std::size_t chunk_size = 256;
  std::size_t threads = 1;  // >1 requires a thread-safe ScoreFn
};

MetricsReport evaluate(const std::vector<EvalQuery>& queries, std::size_t num_items,
                       const ScoreFn& scorer, const EvalOptions& options = {});

MetricsReport evaluate(const Dataset& dataset, Split split, const ScoreFn& scorer,
                       const EvalOptions& options = {});

/// Human-readable table with R@k / N@k columns, one row per labelled report.
std::string format_table(const std::vector<std::pair<std::string, MetricsReport>>& rows);

}  // namespace gsau
