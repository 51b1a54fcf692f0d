#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every op that receives at least one input with requires_grad (while grad
// mode is enabled) appends a node to the thread's active Tape<T>. Backward
// walks the tape in strict reverse creation order. There is no broadcasting:
// shapes must match exactly, and row-vector adds go through add_bias.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "gsau/errors.hpp"
#include "gsau/sparse.hpp"

namespace gsau {

using Shape = std::vector<std::size_t>;

/// Tensor storage. Aligned to the widest SIMD packet so vectorized reductions
/// take the same path, and give the same bits, wherever the buffer lands.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient is written
  bool requires_grad = false;
  bool on_tape = false;
  std::size_t tape_index = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from_data(Shape shape, Buffer<T> data, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Writable view, intended for leaf parameters (optimizer updates, init).
  std::span<T> data_mut() { return impl_->data; }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool is_leaf() const { return !impl_->on_tape; }

  T item() const;
  /// Element (r, c) of a rank-2 tensor.
  T at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape[1] + c]; }

  /// Value copy detached from the tape.
  Tensor detach() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable ops for one thread and scalar type.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(TensorImpl<T>& out)>;

  struct Node {
    std::string_view op;
    std::shared_ptr<TensorImpl<T>> output;
    BackwardFn backward;
  };

  /// The calling thread's tape.
  static Tape& active();

  void record(std::string_view op, const Tensor<T>& output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every node up to the loss in reverse.
  /// Leaf gradients accumulate across calls; intermediate ones are reset.
  void backward(const Tensor<T>& loss);

  /// Drops all nodes. Tensors produced earlier stay valid as values.
  void clear();

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

/// Convenience wrapper around Tape<T>::active().backward(loss).
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>::active().backward(loss);
}

bool grad_enabled();

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Rows whose norm fell below the l2_normalize guard on this thread.
std::size_t l2_guard_hits();
void reset_l2_guard_hits();

inline constexpr double kL2NormalizeGuard = 1e-12;

// ---- forward ops -----------------------------------------------------------

/// [n,k]x[k,m] -> [n,m], or batched [b,n,k]x[b,k,m] -> [b,n,m].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
/// Softmax over the last dimension.
template <typename T> Tensor<T> softmax(const Tensor<T>& a);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);
/// Rows of a rank-2 table; negative indices yield zero rows.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int64_t> indices);
/// Unit-normalizes each row over the last dimension. Rows with norm below
/// kL2NormalizeGuard pass through unchanged and receive no gradient.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& a);
/// ||a_r - b_r||^2 per row: [n,d],[n,d] -> [n].
template <typename T> Tensor<T> squared_row_distance(const Tensor<T>& a, const Tensor<T>& b);
/// ||a_i - b_j||^2 for all row pairs: [n,d],[m,d] -> [n,m].
template <typename T>
Tensor<T> pairwise_squared_distance(const Tensor<T>& a, const Tensor<T>& b);
/// Flat element gather -> rank-1 tensor.
template <typename T> Tensor<T> gather(const Tensor<T>& a, std::span<const std::size_t> flat);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// log(mean(exp(a))) over all elements, max-shifted.
template <typename T> Tensor<T> log_mean_exp(const Tensor<T>& a);
/// Normalizes the last dimension, then applies gain and bias ([d] each).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-8));
template <typename T> Tensor<T> relu(const Tensor<T>& a);
/// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
/// Replaces positions where mask != 0 by value.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask, T value);
/// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// Concatenates along the last dimension; leading dimensions must agree.
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts);
/// Columns [start, start+len) of the last dimension.
template <typename T> Tensor<T> slice_last(const Tensor<T>& a, std::size_t start, std::size_t len);
/// Rows [start, start+count) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count);
/// Adds a [d] vector to every row of a [..., d] tensor.
template <typename T> Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);
/// Sparse-dense product adj * a.
template <typename T> Tensor<T> spmm(const SparseMatrix& adj, const Tensor<T>& a);
/// Inverted dropout; identity when rate == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, double rate, std::mt19937_64& rng);

}  // namespace gsau
