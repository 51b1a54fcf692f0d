#include "gsau/model.hpp"

#include <algorithm>
#include <unordered_map>

namespace gsau {

template <typename T>
GsauModel<T>::GsauModel(std::size_t num_users, std::size_t num_items, const ModelConfig& config,
                        std::uint64_t seed)
    : num_users_(num_users), num_items_(num_items), seed_(seed), config_(config) {
  if (num_users == 0 || num_items == 0) throw ConfigError("model needs at least one user and one item");
  if (config_.seq.hidden_dim != config_.embedding_dim) {
    throw ConfigError("sequential encoder width " + std::to_string(config_.seq.hidden_dim) +
                      " differs from embedding size " + std::to_string(config_.embedding_dim));
  }
  std::mt19937_64 rng(seed);
  embeddings_ = Tensor<T>::zeros({num_users + num_items, config_.embedding_dim}, true);
  fill_truncated_normal(embeddings_, config_.init_std, rng);
  seq_ = SeqEncoder<T>(config_.seq, rng);
}

template <typename T>
NamedTensors<T> GsauModel<T>::parameters() const {
  NamedTensors<T> out;
  out.emplace_back("embeddings", embeddings_);
  for (auto& p : seq_.parameters()) out.push_back(std::move(p));
  return out;
}

template <typename T>
GsauModel<T> GsauModel<T>::clone() const {
  GsauModel copy(num_users_, num_items_, config_, seed_);
  copy.copy_values_from(*this);
  return copy;
}

template <typename T>
void GsauModel<T>::copy_values_from(const GsauModel& other) {
  auto dst = parameters();
  auto src = other.parameters();
  if (dst.size() != src.size()) throw ShapeError("copy_values_from: parameter lists differ");
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k].second.shape() != src[k].second.shape()) {
      throw ShapeError("copy_values_from: " + dst[k].first + " has shape " +
                       shape_str(dst[k].second.shape()) + " but source has " +
                       shape_str(src[k].second.shape()));
    }
    auto d = dst[k].second.data_mut();
    std::copy(src[k].second.data().begin(), src[k].second.data().end(), d.begin());
  }
}

template <typename T>
LossBreakdown<T> compute_loss(const GsauModel<T>& model, const Batch& batch, const SparseMatrix& adj,
                              const Dataset& dataset, const LossConfig& config, bool training,
                              std::mt19937_64* rng) {
  config.validate();
  const std::size_t n_users = model.num_users();
  const auto& table = model.embeddings();
  const std::size_t b = batch.size();
  if (batch.targets.size() != b) throw ShapeError("compute_loss: batch has no targets");

  std::vector<std::int64_t> user_ids(b), item_ids(b), item_rows(b);
  for (std::size_t r = 0; r < b; ++r) {
    user_ids[r] = static_cast<std::int64_t>(batch.users[r]);
    item_ids[r] = batch.targets[r];
    item_rows[r] = static_cast<std::int64_t>(n_users) + batch.targets[r];
  }

  Tensor<T> ga, gu, sa, su;
  if (!config.without_graph) {
    auto nodes = propagate(table, adj, model.config().graph);
    auto user_out = embedding_lookup(nodes, user_ids);
    auto item_out = embedding_lookup(nodes, item_rows);
    std::tie(ga, gu) = graph_losses(user_out, item_out, std::span<const std::int64_t>(user_ids),
                                    std::span<const std::int64_t>(item_ids), config.graph_pooling);
  }
  if (!config.without_sequential) {
    SequentialLossInputs<T> in;
    in.seq_reps = model.seq_encoder().encode(batch, table, n_users, training, rng);
    in.target_items = embedding_lookup(table, item_rows);
    std::vector<std::int32_t> distinct;
    std::vector<std::int64_t> distinct_rows;
    {
      std::unordered_map<std::int32_t, bool> seen;
      for (auto t : batch.targets) {
        if (seen.emplace(t, true).second) {
          distinct.push_back(t);
          distinct_rows.push_back(static_cast<std::int64_t>(n_users) + t);
        }
      }
    }
    in.batch_items = embedding_lookup(table, distinct_rows);
    in.item_outside_sequence.assign(b * distinct.size(), 0);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t c = 0; c < distinct.size(); ++c) {
        in.item_outside_sequence[r * distinct.size() + c] = dataset.in_train(batch.users[r], distinct[c]) ? 0 : 1;
      }
    }
    if (config.variant == Variant::GsauRec) {
      in.all_items = slice_rows(table, n_users, model.num_items());
      in.targets = batch.targets;
    }
    std::tie(sa, su) = sequential_losses(in, config);
  }
  return total_loss(ga, sa, gu, su, config);
}

ScoringHead parse_scoring_head(const std::string& name) {
  if (name == "auto") return ScoringHead::Auto;
  if (name == "sequential") return ScoringHead::Sequential;
  if (name == "graph") return ScoringHead::Graph;
  if (name == "sum") return ScoringHead::Sum;
  throw ConfigError("unknown scoring head '" + name + "' (expected auto, sequential, graph or sum)");
}

std::string to_string(ScoringHead head) {
  switch (head) {
    case ScoringHead::Auto: return "auto";
    case ScoringHead::Sequential: return "sequential";
    case ScoringHead::Graph: return "graph";
    case ScoringHead::Sum: return "sum";
  }
  return "auto";
}

template <typename T>
ModelScorer<T>::ModelScorer(const GsauModel<T>& model, const SparseMatrix& adj, const LossConfig& loss,
                            ScoringHead head, std::size_t max_seq_len)
    : model_(model), head_(head), cosine_sequence_(loss.variant == Variant::Gsau), max_seq_len_(max_seq_len) {
  if (head_ == ScoringHead::Auto) head_ = loss.without_sequential ? ScoringHead::Graph : ScoringHead::Sequential;
  NoGradGuard guard;
  const auto& table = model.embeddings();
  if (head_ == ScoringHead::Graph || head_ == ScoringHead::Sum) {
    auto nodes = propagate(table, adj, model.config().graph);
    auto [users, items] = user_item_split(nodes, model.num_users());
    graph_users_ = l2_normalize(users);
    graph_items_ = l2_normalize(items);
  }
  if (head_ == ScoringHead::Sequential || head_ == ScoringHead::Sum) {
    items_ = slice_rows(table, model.num_users(), model.num_items());
    if (cosine_sequence_) items_ = l2_normalize(items_);
  }
}

template <typename T>
void ModelScorer<T>::score(std::span<const std::size_t> users,
                           const std::vector<std::vector<std::int32_t>>& histories,
                           std::vector<double>& out) const {
  NoGradGuard guard;
  const std::size_t m = model_.num_items();
  out.assign(users.size() * m, 0.0);
  if (head_ == ScoringHead::Sequential || head_ == ScoringHead::Sum) {
    std::vector<std::size_t> user_list(users.begin(), users.end());
    auto batch = make_history_batch(user_list, histories, max_seq_len_);
    auto reps = model_.seq_encoder().encode(batch, model_.embeddings(), model_.num_users(), false, nullptr);
    if (cosine_sequence_) reps = l2_normalize(reps);
    auto logits = score_all_items(reps, items_);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += static_cast<double>(logits.data()[k]);
  }
  if (head_ == ScoringHead::Graph || head_ == ScoringHead::Sum) {
    std::vector<std::int64_t> rows(users.begin(), users.end());
    auto logits = score_all_items(embedding_lookup(graph_users_, rows), graph_items_);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += static_cast<double>(logits.data()[k]);
  }
}

template class GsauModel<float>;
template class GsauModel<double>;
template class ModelScorer<float>;
template class ModelScorer<double>;
template LossBreakdown<float> compute_loss(const GsauModel<float>&, const Batch&, const SparseMatrix&,
                                           const Dataset&, const LossConfig&, bool, std::mt19937_64*);
template LossBreakdown<double> compute_loss(const GsauModel<double>&, const Batch&, const SparseMatrix&,
                                            const Dataset&, const LossConfig&, bool, std::mt19937_64*);

}  // namespace gsau
