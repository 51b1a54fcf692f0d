#include "gsau/seq_encoder.hpp"

#include <cmath>

namespace gsau {

namespace {

constexpr double kAttentionMaskValue = -1e9;

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "gelu") return Activation::Gelu;
  if (name == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + name + "' (expected gelu or relu)");
}

std::string to_string(Activation activation) {
  return activation == Activation::Gelu ? "gelu" : "relu";
}

void SeqEncoderConfig::validate() const {
  if (num_heads == 0 || hidden_dim % num_heads != 0) {
    throw ConfigError("hidden dimension " + std::to_string(hidden_dim) +
                      " is not divisible by " + std::to_string(num_heads) + " heads");
  }
  if (max_seq_len == 0) throw ConfigError("max sequence length must be positive");
  if (ffn_dim == 0) throw ConfigError("feed-forward width must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

template <typename T>
void fill_truncated_normal(Tensor<T>& tensor, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : tensor.data_mut()) {
    double x;
    do {
      x = normal(rng);
    } while (std::fabs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
}

template <typename T>
SeqEncoder<T>::SeqEncoder(const SeqEncoderConfig& config, std::mt19937_64& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.hidden_dim, f = config_.ffn_dim;
  auto weight = [&](std::size_t rows, std::size_t cols) {
    auto t = Tensor<T>::zeros({rows, cols}, true);
    fill_truncated_normal(t, 0.02, rng);
    return t;
  };
  auto constant = [](std::size_t n, T v) {
    return Tensor<T>::from_data({n}, Buffer<T>(n, v), true);
  };
  positional_ = weight(config_.max_seq_len, d);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    TransformerBlock<T> b;
    b.query_w = weight(d, d);
    b.query_b = constant(d, T(0));
    b.key_w = weight(d, d);
    b.key_b = constant(d, T(0));
    b.value_w = weight(d, d);
    b.value_b = constant(d, T(0));
    b.out_w = weight(d, d);
    b.out_b = constant(d, T(0));
    b.attn_norm_gain = constant(d, T(1));
    b.attn_norm_bias = constant(d, T(0));
    b.ffn_in_w = weight(d, f);
    b.ffn_in_b = constant(f, T(0));
    b.ffn_out_w = weight(f, d);
    b.ffn_out_b = constant(d, T(0));
    b.ffn_norm_gain = constant(d, T(1));
    b.ffn_norm_bias = constant(d, T(0));
    blocks_.push_back(std::move(b));
  }
}

template <typename T>
Tensor<T> SeqEncoder<T>::block_forward(const TransformerBlock<T>& block, const Tensor<T>& x,
                                       std::size_t batch, std::size_t width,
                                       const std::vector<std::uint8_t>& attn_mask, bool training,
                                       std::mt19937_64* rng) const {
  const std::size_t d = config_.hidden_dim;
  const std::size_t heads = config_.num_heads;
  const std::size_t dh = d / heads;
  const double rate = training ? config_.dropout : 0.0;
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  auto q = linear(x, block.query_w, block.query_b);
  auto k = linear(x, block.key_w, block.key_b);
  auto v = linear(x, block.value_w, block.value_b);

  std::vector<Tensor<T>> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = reshape(slice_last(q, h * dh, dh), {batch, width, dh});
    auto kh = reshape(slice_last(k, h * dh, dh), {batch, width, dh});
    auto vh = reshape(slice_last(v, h * dh, dh), {batch, width, dh});
    auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    scores = masked_fill(scores, attn_mask, static_cast<T>(kAttentionMaskValue));
    auto probs = softmax(scores);
    if (rate > 0.0) probs = dropout(probs, rate, *rng);
    head_out.push_back(reshape(matmul(probs, vh), {batch * width, dh}));
  }
  auto attended = heads == 1 ? head_out.front() : concat(head_out);
  attended = linear(attended, block.out_w, block.out_b);
  if (rate > 0.0) attended = dropout(attended, rate, *rng);
  auto h1 = layer_norm(add(x, attended), block.attn_norm_gain, block.attn_norm_bias);

  auto inner = linear(h1, block.ffn_in_w, block.ffn_in_b);
  inner = config_.activation == Activation::Gelu ? gelu(inner) : relu(inner);
  auto ffn = linear(inner, block.ffn_out_w, block.ffn_out_b);
  if (rate > 0.0) ffn = dropout(ffn, rate, *rng);
  return layer_norm(add(h1, ffn), block.ffn_norm_gain, block.ffn_norm_bias);
}

template <typename T>
Tensor<T> SeqEncoder<T>::encode_positions(const Batch& batch, const Tensor<T>& table,
                                          std::size_t item_offset, bool training,
                                          std::mt19937_64* rng) const {
  const std::size_t b = batch.size(), w = batch.width, d = config_.hidden_dim;
  if (table.rank() != 2 || table.dim(1) != d) {
    throw ShapeError("encode: embedding table " + shape_str(table.shape()) +
                     " does not have hidden width " + std::to_string(d));
  }
  if (w > config_.max_seq_len) {
    throw ShapeError("encode: prefix width " + std::to_string(w) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  if (training && config_.dropout > 0.0 && rng == nullptr) {
    throw ConfigError("encode: dropout in training mode needs a random generator");
  }
  if (b == 0 || w == 0) throw ShapeError("encode: empty batch");

  std::vector<std::int64_t> item_rows(b * w, -1), positions(b * w, -1);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t j = 0; j < w; ++j) {
      const auto idx = r * w + j;
      if (!batch.valid[idx]) continue;
      item_rows[idx] = static_cast<std::int64_t>(item_offset) + batch.prefix[idx];
      positions[idx] = static_cast<std::int64_t>(w - 1 - j);
    }
  }
  // Key j is hidden from query i when it lies in the future or is padding.
  std::vector<std::uint8_t> attn_mask(b * w * w, 0);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t i = 0; i < w; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        attn_mask[(r * w + i) * w + j] = (j > i || !batch.valid[r * w + j]) ? 1 : 0;
      }
    }
  }

  auto x = add(embedding_lookup(table, item_rows), embedding_lookup(positional_, positions));
  if (training && config_.dropout > 0.0) x = dropout(x, config_.dropout, *rng);
  if (!config_.identity_blocks) {
    for (const auto& block : blocks_) x = block_forward(block, x, b, w, attn_mask, training, rng);
  }
  return reshape(x, {b, w, d});
}

template <typename T>
Tensor<T> SeqEncoder<T>::encode(const Batch& batch, const Tensor<T>& table, std::size_t item_offset,
                                bool training, std::mt19937_64* rng) const {
  auto states = encode_positions(batch, table, item_offset, training, rng);
  const std::size_t b = batch.size(), w = batch.width, d = config_.hidden_dim;
  std::vector<std::int64_t> last(b);
  for (std::size_t r = 0; r < b; ++r) last[r] = static_cast<std::int64_t>(r * w + w - 1);
  return embedding_lookup(reshape(states, {b * w, d}), last);
}

template <typename T>
NamedTensors<T> SeqEncoder<T>::parameters() const {
  NamedTensors<T> out;
  out.emplace_back("seq/positional", positional_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "seq/block" + std::to_string(l) + "/";
    out.emplace_back(p + "query_w", b.query_w);
    out.emplace_back(p + "query_b", b.query_b);
    out.emplace_back(p + "key_w", b.key_w);
    out.emplace_back(p + "key_b", b.key_b);
    out.emplace_back(p + "value_w", b.value_w);
    out.emplace_back(p + "value_b", b.value_b);
    out.emplace_back(p + "out_w", b.out_w);
    out.emplace_back(p + "out_b", b.out_b);
    out.emplace_back(p + "attn_norm_gain", b.attn_norm_gain);
    out.emplace_back(p + "attn_norm_bias", b.attn_norm_bias);
    out.emplace_back(p + "ffn_in_w", b.ffn_in_w);
    out.emplace_back(p + "ffn_in_b", b.ffn_in_b);
    out.emplace_back(p + "ffn_out_w", b.ffn_out_w);
    out.emplace_back(p + "ffn_out_b", b.ffn_out_b);
    out.emplace_back(p + "ffn_norm_gain", b.ffn_norm_gain);
    out.emplace_back(p + "ffn_norm_bias", b.ffn_norm_bias);
  }
  return out;
}

template <typename T>
Tensor<T> score_all_items(const Tensor<T>& seq_reps, const Tensor<T>& items) {
  return matmul(seq_reps, transpose(items));
}

template void fill_truncated_normal(Tensor<float>&, double, std::mt19937_64&);
template void fill_truncated_normal(Tensor<double>&, double, std::mt19937_64&);
template class SeqEncoder<float>;
template class SeqEncoder<double>;
template Tensor<float> score_all_items(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> score_all_items(const Tensor<double>&, const Tensor<double>&);

}  // namespace gsau
