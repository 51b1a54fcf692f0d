#include "gsau/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "gsau/errors.hpp"

namespace gsau {

std::string to_string(Split split) { return split == Split::Validation ? "validation" : "test"; }

Split parse_split(const std::string& name) {
  if (name == "validation" || name == "valid") return Split::Validation;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name + "' (expected validation or test)");
}

std::vector<EvalQuery> build_queries(const Dataset& dataset, Split split) {
  std::vector<EvalQuery> queries;
  queries.reserve(dataset.num_users());
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    const auto& s = dataset.split(u);
    EvalQuery q;
    q.user = u;
    q.history = s.train;
    q.excluded = s.train;
    if (split == Split::Validation) {
      q.target = s.validation;
    } else {
      q.history.push_back(s.validation);
      q.excluded.push_back(s.validation);
      q.target = s.test;
    }
    std::erase(q.excluded, q.target);
    std::sort(q.excluded.begin(), q.excluded.end());
    q.excluded.erase(std::unique(q.excluded.begin(), q.excluded.end()), q.excluded.end());
    queries.push_back(std::move(q));
  }
  return queries;
}

namespace {

bool ranks_before(std::span<const double> scores, std::int32_t a, std::int32_t b) {
  const double sa = scores[static_cast<std::size_t>(a)];
  const double sb = scores[static_cast<std::size_t>(b)];
  return sa != sb ? sa > sb : a < b;
}

}  // namespace

std::vector<std::int32_t> rank_items(std::span<const double> scores,
                                     std::span<const std::int32_t> excluded) {
  std::vector<std::uint8_t> skip(scores.size(), 0);
  for (auto e : excluded) skip[static_cast<std::size_t>(e)] = 1;
  std::vector<std::int32_t> order;
  order.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!skip[i]) order.push_back(static_cast<std::int32_t>(i));
  }
  std::sort(order.begin(), order.end(),
            [&](std::int32_t a, std::int32_t b) { return ranks_before(scores, a, b); });
  return order;
}

std::size_t target_rank(std::span<const double> scores, std::span<const std::int32_t> excluded,
                        std::int32_t target) {
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto item = static_cast<std::int32_t>(i);
    if (item != target && ranks_before(scores, item, target)) ++ahead;
  }
  // Excluded items that would have ranked ahead do not count.
  for (auto e : excluded) {
    if (e != target && ranks_before(scores, e, target)) --ahead;
  }
  return ahead + 1;
}

double recall_at_k(std::size_t rank, std::size_t k) {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (rank < 1) throw ConfigError("rank must be at least 1");
  return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(std::size_t rank, std::size_t k) {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (rank < 1) throw ConfigError("rank must be at least 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

std::string MetricsReport::to_json_line() const {
  nlohmann::ordered_json j;
  j["split"] = split;
  j["epoch"] = epoch;
  j["num_users"] = num_users;
  for (auto k : ks) {
    j["recall@" + std::to_string(k)] = recall.at(k);
    j["ndcg@" + std::to_string(k)] = ndcg.at(k);
  }
  for (const auto& [key, value] : metadata) j["meta"][key] = value;
  return j.dump();
}

bool MetricsReport::same_metrics(const MetricsReport& other) const {
  return split == other.split && ks == other.ks && recall == other.recall && ndcg == other.ndcg &&
         num_users == other.num_users;
}

MetricsReport evaluate(const std::vector<EvalQuery>& queries, std::size_t num_items,
                       const ScoreFn& scorer, const EvalOptions& options) {
  if (queries.empty()) throw DataError("evaluate: no users in split");
  std::vector<std::size_t> ranks(queries.size(), 0);
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk_size);
  const std::size_t num_chunks = (queries.size() + chunk - 1) / chunk;

  auto run_chunk = [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(queries.size(), lo + chunk);
    std::vector<std::size_t> users;
    std::vector<std::vector<std::int32_t>> histories;
    for (std::size_t q = lo; q < hi; ++q) {
      users.push_back(queries[q].user);
      histories.push_back(queries[q].history);
    }
    std::vector<double> scores;
    scorer(users, histories, scores);
    if (scores.size() != users.size() * num_items) {
      throw ShapeError("evaluate: scorer returned " + std::to_string(scores.size()) + " scores for " +
                       std::to_string(users.size()) + " users x " + std::to_string(num_items) + " items");
    }
    for (std::size_t q = lo; q < hi; ++q) {
      std::span<const double> row(scores.data() + (q - lo) * num_items, num_items);
      ranks[q] = target_rank(row, queries[q].excluded, queries[q].target);
    }
  };

  const std::size_t threads = std::min(std::max<std::size_t>(1, options.threads), num_chunks);
  if (threads == 1) {
    for (std::size_t c = 0; c < num_chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t c = t; c < num_chunks; c += threads) run_chunk(c);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  MetricsReport report;
  report.ks = options.ks;
  report.num_users = queries.size();
  for (auto k : options.ks) {
    double r = 0.0, n = 0.0;
    for (auto rank : ranks) {
      r += recall_at_k(rank, k);
      n += ndcg_at_k(rank, k);
    }
    report.recall[k] = r / static_cast<double>(ranks.size());
    report.ndcg[k] = n / static_cast<double>(ranks.size());
  }
  report.ranks = std::move(ranks);
  return report;
}

MetricsReport evaluate(const Dataset& dataset, Split split, const ScoreFn& scorer,
                       const EvalOptions& options) {
  auto report = evaluate(build_queries(dataset, split), dataset.num_items(), scorer, options);
  report.split = to_string(split);
  return report;
}

std::string format_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ostringstream os;
  if (rows.empty()) return {};
  const auto& ks = rows.front().second.ks;
  std::size_t label_width = 6;
  for (const auto& [label, r] : rows) label_width = std::max(label_width, label.size());
  os << std::left << std::setw(static_cast<int>(label_width)) << "Method";
  for (auto k : ks) os << " | " << std::setw(7) << ("R@" + std::to_string(k));
  for (auto k : ks) os << " | " << std::setw(7) << ("N@" + std::to_string(k));
  os << '\n' << std::string(label_width + ks.size() * 2 * 10, '-') << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& [label, r] : rows) {
    os << std::left << std::setw(static_cast<int>(label_width)) << label;
    for (auto k : ks) os << " | " << std::setw(7) << r.recall.at(k);
    for (auto k : ks) os << " | " << std::setw(7) << r.ndcg.at(k);
    os << '\n';
  }
  return os.str();
}

}  // namespace gsau
