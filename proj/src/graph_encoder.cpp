#include "gsau/graph_encoder.hpp"

namespace gsau {

LayerCombination parse_layer_combination(const std::string& name) {
  if (name == "mean") return LayerCombination::Mean;
  if (name == "last") return LayerCombination::Last;
  throw ConfigError("unknown layer combination '" + name + "' (expected mean or last)");
}

std::string to_string(LayerCombination combination) {
  return combination == LayerCombination::Mean ? "mean" : "last";
}

template <typename T>
Tensor<T> propagate(const Tensor<T>& table, const SparseMatrix& adj, const GraphEncoderConfig& config) {
  if (table.rank() != 2 || adj.rows() != table.dim(0) || adj.cols() != table.dim(0)) {
    throw ShapeError("propagate: adjacency " + std::to_string(adj.rows()) + "x" +
                     std::to_string(adj.cols()) + " does not match embedding table " +
                     shape_str(table.shape()));
  }
  if (config.num_layers == 0) return table;

  Tensor<T> layer = table;
  Tensor<T> total = table;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    layer = spmm(adj, layer);
    if (config.combination == LayerCombination::Mean) total = add(total, layer);
  }
  if (config.combination == LayerCombination::Last) return layer;
  return scale(total, T(1) / static_cast<T>(config.num_layers + 1));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> user_item_split(const Tensor<T>& nodes, std::size_t num_users) {
  if (nodes.rank() != 2 || num_users > nodes.dim(0)) {
    throw ShapeError("user_item_split: " + std::to_string(num_users) + " users exceed " +
                     shape_str(nodes.shape()));
  }
  return {slice_rows(nodes, 0, num_users), slice_rows(nodes, num_users, nodes.dim(0) - num_users)};
}

template Tensor<float> propagate(const Tensor<float>&, const SparseMatrix&, const GraphEncoderConfig&);
template Tensor<double> propagate(const Tensor<double>&, const SparseMatrix&, const GraphEncoderConfig&);
template std::pair<Tensor<float>, Tensor<float>> user_item_split(const Tensor<float>&, std::size_t);
template std::pair<Tensor<double>, Tensor<double>> user_item_split(const Tensor<double>&, std::size_t);

}  // namespace gsau
