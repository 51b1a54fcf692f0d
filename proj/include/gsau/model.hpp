#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gsau/au_loss.hpp"
#include "gsau/dataset.hpp"
#include "gsau/graph_encoder.hpp"
#include "gsau/seq_encoder.hpp"
#include "gsau/tensor.hpp"

namespace gsau {

struct ModelConfig {
  std::size_t embedding_dim = 64;
  double init_std = 0.02;
  GraphEncoderConfig graph;
  SeqEncoderConfig seq;
};

/// Shared (N+M) x d embedding table, users first, plus the sequential
/// encoder's own parameters. The graph encoder has no parameters.
template <typename T>
class GsauModel {
 public:
  GsauModel() = default;
  GsauModel(std::size_t num_users, std::size_t num_items, const ModelConfig& config,
            std::uint64_t seed);

  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }
  const ModelConfig& config() const { return config_; }

  const Tensor<T>& embeddings() const { return embeddings_; }
  Tensor<T>& embeddings() { return embeddings_; }
  const SeqEncoder<T>& seq_encoder() const { return seq_; }
  SeqEncoder<T>& seq_encoder() { return seq_; }

  /// "embeddings" followed by the encoder parameters, in a fixed order.
  NamedTensors<T> parameters() const;

  /// Deep copy with independent storage.
  GsauModel clone() const;
  /// Overwrites parameter values from a model of identical structure.
  void copy_values_from(const GsauModel& other);

 private:
  std::size_t num_users_ = 0;
  std::size_t num_items_ = 0;
  std::uint64_t seed_ = 0;
  ModelConfig config_;
  Tensor<T> embeddings_;
  SeqEncoder<T> seq_;
};

/// Full objective for one batch. Skips whichever encoder the ablation flags
/// switch off. `rng` drives dropout and may be null when training is false.
template <typename T>
LossBreakdown<T> compute_loss(const GsauModel<T>& model, const Batch& batch, const SparseMatrix& adj,
                              const Dataset& dataset, const LossConfig& config, bool training,
                              std::mt19937_64* rng);

enum class ScoringHead { Auto, Sequential, Graph, Sum };

ScoringHead parse_scoring_head(const std::string& name);
std::string to_string(ScoringHead head);

/// Inference-time item scores for users given their interaction histories.
template <typename T>
class ModelScorer {
 public:
  ModelScorer(const GsauModel<T>& model, const SparseMatrix& adj, const LossConfig& loss,
              ScoringHead head, std::size_t max_seq_len);

  ScoringHead head() const { return head_; }

  /// Writes users.size() x M scores, row-major.
  void score(std::span<const std::size_t> users, const std::vector<std::vector<std::int32_t>>& histories,
             std::vector<double>& out) const;

 private:
  const GsauModel<T>& model_;
  ScoringHead head_;
  bool cosine_sequence_;
  std::size_t max_seq_len_;
  Tensor<T> graph_users_;  // normalized e_u^(L)
  Tensor<T> graph_items_;  // normalized e_i^(L)
  Tensor<T> items_;        // e_i^(0), normalized for cosine scoring
};

}  // namespace gsau
