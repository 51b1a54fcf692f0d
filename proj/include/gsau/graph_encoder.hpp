#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "gsau/sparse.hpp"
#include "gsau/tensor.hpp"

namespace gsau {

enum class LayerCombination { Mean, Last };

LayerCombination parse_layer_combination(const std::string& name);
std::string to_string(LayerCombination combination);

struct GraphEncoderConfig {
  std::size_t num_layers = 2;
  LayerCombination combination = LayerCombination::Mean;
};

/// LightGCN propagation: E^(l+1) = adj * E^(l), combined over layers 0..L.
/// Linear in the table, no self-loops and no feature transform.
template <typename T>
Tensor<T> propagate(const Tensor<T>& table, const SparseMatrix& adj, const GraphEncoderConfig& config);

/// Splits an (N+M) x d matrix into its user block and item block.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> user_item_split(const Tensor<T>& nodes, std::size_t num_users);

}  // namespace gsau
