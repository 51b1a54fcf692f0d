#pragma once

// Alignment / uniformity objectives on the unit hypersphere and their
// graph-side and sequence-side pair distributions.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gsau/tensor.hpp"

namespace gsau {

enum class Variant { Gsau, GsauRec };
enum class UniformityPooling { Average, Union };

Variant parse_variant(const std::string& name);
std::string to_string(Variant variant);
UniformityPooling parse_pooling(const std::string& name);
std::string to_string(UniformityPooling pooling);

struct LossConfig {
  double gamma = 0.1;
  Variant variant = Variant::GsauRec;
  bool without_graph = false;
  bool without_sequential = false;
  bool without_ui_uniform = false;
  UniformityPooling graph_pooling = UniformityPooling::Average;
  UniformityPooling sequential_pooling = UniformityPooling::Union;

  void validate() const;
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double graph_alignment = 0.0;
  double sequential = 0.0;  // alignment, or cross-entropy for GsauRec
  double graph_uniformity = 0.0;
  double sequential_uniformity = 0.0;
  double total_value = 0.0;
};

/// Mean over rows of ||f(x_r) - f(x_pos_r)||^2 with f the row unit-normalization.
template <typename T>
Tensor<T> alignment_loss(const Tensor<T>& x, const Tensor<T>& x_pos);

enum class PairMode { WithinX, WithinY, Cross, Union };

/// Squared distances between normalized rows for the chosen pair set.
/// Within-set pairs are unordered and exclude self-pairs; cross pairs are
/// (x_i, y_j) where cross_allowed[i * m + j] != 0, or all pairs when
/// cross_allowed is empty. Union concatenates all three sets.
template <typename T>
Tensor<T> uniformity_pair_distances(const Tensor<T>& x, const Tensor<T>& y, PairMode mode,
                                    std::span<const std::uint8_t> cross_allowed = {});

/// log mean exp(-2 d^2) over the selected pair set. Throws if it is empty.
template <typename T>
Tensor<T> uniformity_loss(const Tensor<T>& x, const Tensor<T>& y, PairMode mode,
                          std::span<const std::uint8_t> cross_allowed = {});

/// Graph-side terms. Rows are per batch instance; `user_ids` / `item_ids`
/// identify them so that uniformity pairs distinct users and distinct items.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> graph_losses(const Tensor<T>& user_out, const Tensor<T>& item_out,
                                             std::span<const std::int64_t> user_ids,
                                             std::span<const std::int64_t> item_ids,
                                             UniformityPooling pooling);

template <typename T>
struct SequentialLossInputs {
  Tensor<T> seq_reps;      // [B, d] sequence representations
  Tensor<T> target_items;  // [B, d] base embeddings of each target
  Tensor<T> batch_items;   // [K, d] distinct in-batch items
  /// [B, K]; 1 where item k is outside sequence b's history (third subset).
  std::vector<std::uint8_t> item_outside_sequence;
  Tensor<T> all_items;     // [M, d], needed for cross-entropy
  std::vector<std::int32_t> targets;
};

/// (alignment or cross-entropy, sequential uniformity).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> sequential_losses(const SequentialLossInputs<T>& in,
                                                  const LossConfig& config);

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

/// total = GA + SA + gamma * (GU + SU); undefined components count as zero.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& graph_alignment, const Tensor<T>& sequential,
                            const Tensor<T>& graph_uniformity, const Tensor<T>& sequential_uniformity,
                            const LossConfig& config);

}  // namespace gsau
