#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gsau/dataset.hpp"
#include "gsau/tensor.hpp"

namespace gsau {

enum class Activation { Gelu, Relu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation activation);

struct SeqEncoderConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t hidden_dim = 64;
  std::size_t ffn_dim = 256;
  std::size_t max_seq_len = 50;
  double dropout = 0.2;
  Activation activation = Activation::Gelu;
  /// Test hook: skip every transformer block.
  bool identity_blocks = false;

  void validate() const;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Samples N(0, std^2) truncated to two standard deviations.
template <typename T>
void fill_truncated_normal(Tensor<T>& tensor, double stddev, std::mt19937_64& rng);

template <typename T>
struct TransformerBlock {
  Tensor<T> query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  Tensor<T> attn_norm_gain, attn_norm_bias;
  Tensor<T> ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  Tensor<T> ffn_norm_gain, ffn_norm_bias;
};

/// Causal self-attention encoder over left-padded item prefixes. Positions
/// are counted backwards from the most recent item, so extra left padding
/// never changes a valid position's output.
template <typename T>
class SeqEncoder {
 public:
  SeqEncoder() = default;
  SeqEncoder(const SeqEncoderConfig& config, std::mt19937_64& rng);

  const SeqEncoderConfig& config() const { return config_; }

  /// Hidden states for every slot: [batch, width, d]. Item rows are read from
  /// `table` at `item_offset + item`.
  Tensor<T> encode_positions(const Batch& batch, const Tensor<T>& table, std::size_t item_offset,
                             bool training, std::mt19937_64* rng) const;

  /// Final-slot (most recent item) state per prefix: [batch, d].
  Tensor<T> encode(const Batch& batch, const Tensor<T>& table, std::size_t item_offset,
                   bool training, std::mt19937_64* rng) const;

  NamedTensors<T> parameters() const;

  Tensor<T>& positional() { return positional_; }
  std::vector<TransformerBlock<T>>& blocks() { return blocks_; }

 private:
  Tensor<T> block_forward(const TransformerBlock<T>& block, const Tensor<T>& x, std::size_t batch,
                          std::size_t width, const std::vector<std::uint8_t>& attn_mask,
                          bool training, std::mt19937_64* rng) const;

  SeqEncoderConfig config_;
  Tensor<T> positional_;
  std::vector<TransformerBlock<T>> blocks_;
};

/// logits[b][i] = <seq_reps[b], items[i]>.
template <typename T>
Tensor<T> score_all_items(const Tensor<T>& seq_reps, const Tensor<T>& items);

}  // namespace gsau
