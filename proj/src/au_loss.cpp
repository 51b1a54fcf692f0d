#include "gsau/au_loss.hpp"

#include <cmath>
#include <unordered_set>

namespace gsau {

namespace {

/// Positions of the first occurrence of each distinct id.
std::vector<std::int64_t> first_occurrences(std::span<const std::int64_t> ids) {
  std::unordered_set<std::int64_t> seen;
  std::vector<std::int64_t> rows;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (seen.insert(ids[r]).second) rows.push_back(static_cast<std::int64_t>(r));
  }
  return rows;
}

template <typename T>
Tensor<T> uniformity_from_distances(const Tensor<T>& sq_dist) {
  return log_mean_exp(scale(sq_dist, T(-2)));
}

}  // namespace

Variant parse_variant(const std::string& name) {
  if (name == "gsau") return Variant::Gsau;
  if (name == "gsau-rec" || name == "gsau_rec") return Variant::GsauRec;
  throw ConfigError("unknown variant '" + name + "' (expected gsau or gsau-rec)");
}

std::string to_string(Variant variant) { return variant == Variant::Gsau ? "gsau" : "gsau-rec"; }

UniformityPooling parse_pooling(const std::string& name) {
  if (name == "average") return UniformityPooling::Average;
  if (name == "union") return UniformityPooling::Union;
  throw ConfigError("unknown uniformity pooling '" + name + "' (expected average or union)");
}

std::string to_string(UniformityPooling pooling) {
  return pooling == UniformityPooling::Average ? "average" : "union";
}

void LossConfig::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be a finite value >= 0");
  if (without_graph && without_sequential) {
    throw ConfigError("without-graph and without-sequential cannot both be set");
  }
}

template <typename T>
Tensor<T> alignment_loss(const Tensor<T>& x, const Tensor<T>& x_pos) {
  if (x.rank() != 2 || x.dim(0) == 0) {
    throw ShapeError("alignment_loss: need at least one positive pair, got " + shape_str(x.shape()));
  }
  return mean(squared_row_distance(l2_normalize(x), l2_normalize(x_pos)));
}

template <typename T>
Tensor<T> uniformity_pair_distances(const Tensor<T>& x, const Tensor<T>& y, PairMode mode,
                                    std::span<const std::uint8_t> cross_allowed) {
  std::vector<Tensor<T>> parts;
  auto within = [&](const Tensor<T>& a) {
    const std::size_t n = a.dim(0);
    if (n < 2) return;
    auto na = l2_normalize(a);
    auto dist = pairwise_squared_distance(na, na);
    std::vector<std::size_t> upper;
    upper.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) upper.push_back(i * n + j);
    }
    parts.push_back(gather(dist, upper));
  };
  auto cross = [&]() {
    const std::size_t n = x.dim(0), m = y.dim(0);
    if (!cross_allowed.empty() && cross_allowed.size() != n * m) {
      throw ShapeError("uniformity: cross mask of " + std::to_string(cross_allowed.size()) +
                       " entries for " + std::to_string(n) + "x" + std::to_string(m) + " pairs");
    }
    std::vector<std::size_t> picked;
    for (std::size_t k = 0; k < n * m; ++k) {
      if (cross_allowed.empty() || cross_allowed[k]) picked.push_back(k);
    }
    if (picked.empty()) return;
    auto dist = pairwise_squared_distance(l2_normalize(x), l2_normalize(y));
    parts.push_back(gather(dist, picked));
  };

  switch (mode) {
    case PairMode::WithinX: within(x); break;
    case PairMode::WithinY: within(y); break;
    case PairMode::Cross: cross(); break;
    case PairMode::Union:
      within(x);
      within(y);
      cross();
      break;
  }
  if (parts.empty()) throw ShapeError("uniformity_loss: the selected pair set is empty");
  return parts.size() == 1 ? parts.front() : concat(parts);
}

template <typename T>
Tensor<T> uniformity_loss(const Tensor<T>& x, const Tensor<T>& y, PairMode mode,
                          std::span<const std::uint8_t> cross_allowed) {
  return uniformity_from_distances(uniformity_pair_distances(x, y, mode, cross_allowed));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> graph_losses(const Tensor<T>& user_out, const Tensor<T>& item_out,
                                             std::span<const std::int64_t> user_ids,
                                             std::span<const std::int64_t> item_ids,
                                             UniformityPooling pooling) {
  if (user_ids.size() != user_out.dim(0) || item_ids.size() != item_out.dim(0)) {
    throw ShapeError("graph_losses: id lists do not match " + shape_str(user_out.shape()) + " / " +
                     shape_str(item_out.shape()));
  }
  auto alignment = alignment_loss(user_out, item_out);

  auto users = embedding_lookup(user_out, first_occurrences(user_ids));
  auto items = embedding_lookup(item_out, first_occurrences(item_ids));
  if (users.dim(0) < 2 && items.dim(0) < 2) {
    throw ShapeError("graph_losses: batch needs at least 2 distinct users or 2 distinct items");
  }
  Tensor<T> uniformity;
  if (pooling == UniformityPooling::Union) {
    uniformity = uniformity_loss(users, items, PairMode::Union, std::vector<std::uint8_t>(users.dim(0) * items.dim(0), 0));
  } else {
    std::vector<Tensor<T>> halves;
    if (users.dim(0) >= 2) halves.push_back(uniformity_loss(users, users, PairMode::WithinX));
    if (items.dim(0) >= 2) halves.push_back(uniformity_loss(items, items, PairMode::WithinX));
    uniformity = halves.size() == 1 ? halves.front() : scale(add(halves[0], halves[1]), T(0.5));
  }
  return {alignment, uniformity};
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || targets.empty()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t m = logits.dim(1);
  std::vector<std::size_t> picks(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= m) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " outside " +
                       std::to_string(m) + " classes");
    }
    picks[r] = r * m + static_cast<std::size_t>(targets[r]);
  }
  return scale(mean(gather(log_softmax(logits), picks)), T(-1));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> sequential_losses(const SequentialLossInputs<T>& in,
                                                  const LossConfig& config) {
  Tensor<T> first;
  if (config.variant == Variant::Gsau) {
    first = alignment_loss(in.seq_reps, in.target_items);
  } else {
    first = cross_entropy(matmul(in.seq_reps, transpose(in.all_items)), in.targets);
  }

  const std::size_t b = in.seq_reps.dim(0), k = in.batch_items.dim(0);
  std::vector<std::uint8_t> cross_mask = in.item_outside_sequence;
  if (config.without_ui_uniform) cross_mask.assign(b * k, 0);
  if (cross_mask.size() != b * k) {
    throw ShapeError("sequential_losses: membership mask has " + std::to_string(cross_mask.size()) +
                     " entries for " + std::to_string(b) + "x" + std::to_string(k) + " pairs");
  }

  Tensor<T> uniformity;
  if (config.sequential_pooling == UniformityPooling::Union) {
    // Cross pairs are laid out item-major for uniformity_loss(items, seqs).
    std::vector<std::uint8_t> item_by_seq(k * b, 0);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t c = 0; c < k; ++c) item_by_seq[c * b + r] = cross_mask[r * k + c];
    }
    uniformity = uniformity_loss(in.batch_items, in.seq_reps, PairMode::Union, item_by_seq);
  } else {
    std::vector<Tensor<T>> subsets;
    if (k >= 2) subsets.push_back(uniformity_loss(in.batch_items, in.batch_items, PairMode::WithinX));
    if (b >= 2) subsets.push_back(uniformity_loss(in.seq_reps, in.seq_reps, PairMode::WithinX));
    bool any_cross = false;
    for (auto v : cross_mask) any_cross = any_cross || v;
    if (any_cross) subsets.push_back(uniformity_loss(in.seq_reps, in.batch_items, PairMode::Cross, cross_mask));
    if (subsets.empty()) throw ShapeError("sequential_losses: no uniformity pairs in batch");
    uniformity = subsets.front();
    for (std::size_t s = 1; s < subsets.size(); ++s) uniformity = add(uniformity, subsets[s]);
    uniformity = scale(uniformity, T(1) / static_cast<T>(subsets.size()));
  }
  return {first, uniformity};
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& graph_alignment, const Tensor<T>& sequential,
                            const Tensor<T>& graph_uniformity, const Tensor<T>& sequential_uniformity,
                            const LossConfig& config) {
  LossBreakdown<T> out;
  const T gamma = static_cast<T>(config.gamma);
  std::vector<Tensor<T>> terms;
  auto value = [](const Tensor<T>& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; };

  if (!config.without_graph) {
    out.graph_alignment = value(graph_alignment);
    out.graph_uniformity = value(graph_uniformity);
    if (graph_alignment.defined()) terms.push_back(graph_alignment);
    if (graph_uniformity.defined()) terms.push_back(scale(graph_uniformity, gamma));
  }
  if (!config.without_sequential) {
    out.sequential = value(sequential);
    out.sequential_uniformity = value(sequential_uniformity);
    if (sequential.defined()) terms.push_back(sequential);
    if (sequential_uniformity.defined()) terms.push_back(scale(sequential_uniformity, gamma));
  }
  if (terms.empty()) {
    out.total = Tensor<T>::scalar(T(0));
  } else {
    out.total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) out.total = add(out.total, terms[i]);
  }
  out.total_value = static_cast<double>(out.total.item());
  if (!std::isfinite(out.total_value)) {
    throw NumericError("total loss is not finite (graph alignment " + std::to_string(out.graph_alignment) +
                       ", sequential " + std::to_string(out.sequential) + ", graph uniformity " +
                       std::to_string(out.graph_uniformity) + ", sequential uniformity " +
                       std::to_string(out.sequential_uniformity) + ")");
  }
  return out;
}

#define GSAU_INSTANTIATE_LOSSES(T)                                                                  \
  template Tensor<T> alignment_loss(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> uniformity_pair_distances(const Tensor<T>&, const Tensor<T>&, PairMode,        \
                                               std::span<const std::uint8_t>);                      \
  template Tensor<T> uniformity_loss(const Tensor<T>&, const Tensor<T>&, PairMode,                  \
                                     std::span<const std::uint8_t>);                                \
  template std::pair<Tensor<T>, Tensor<T>> graph_losses(const Tensor<T>&, const Tensor<T>&,         \
                                                        std::span<const std::int64_t>,              \
                                                        std::span<const std::int64_t>,              \
                                                        UniformityPooling);                         \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);                \
  template std::pair<Tensor<T>, Tensor<T>> sequential_losses(const SequentialLossInputs<T>&,        \
                                                             const LossConfig&);                    \
  template LossBreakdown<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                       const Tensor<T>&, const LossConfig&);

GSAU_INSTANTIATE_LOSSES(float)
GSAU_INSTANTIATE_LOSSES(double)

#undef GSAU_INSTANTIATE_LOSSES

}  // namespace gsau
