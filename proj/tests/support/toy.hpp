#pragma once

// The 5-user / 7-item toy model used by the gradient suites.

#include <random>

#include "gsau/model.hpp"
#include "support/fixtures.hpp"

namespace testing_support {

struct Toy {
  gsau::Dataset dataset;
  gsau::SparseMatrix adj;
  gsau::GsauModel<double> model;
  gsau::Batch batch;  // every training instance in one batch
};

inline gsau::ModelConfig toy_model_config() {
  gsau::ModelConfig c;
  c.embedding_dim = 8;
  c.init_std = 0.3;
  c.graph.num_layers = 2;
  c.seq.num_layers = 1;
  c.seq.num_heads = 2;
  c.seq.hidden_dim = 8;
  c.seq.ffn_dim = 16;
  c.seq.max_seq_len = 5;
  c.seq.dropout = 0.0;
  return c;
}

inline Toy make_toy(std::uint64_t seed = 5) {
  auto ds = dataset_from_sequences(
      {{0, 1, 2, 3, 4}, {2, 3, 5, 6, 0, 1}, {6, 5, 4, 3}, {1, 3, 5, 0, 2, 4, 6}, {4, 0, 6, 2}});
  auto adj = gsau::build_normalized_adjacency(ds.train_pairs(), ds.num_users(), ds.num_items());
  gsau::GsauModel<double> model(ds.num_users(), ds.num_items(), toy_model_config(), seed);
  // Encoder weights well above the production init so attention and the FFN
  // operate away from their near-linear regime.
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto [name, p] : model.seq_encoder().parameters()) {
    if (name.find("gain") != std::string::npos) continue;
    for (auto& v : p.data_mut()) v = normal(rng);
  }
  auto batches = gsau::make_batches(ds, 1024, 5, seed);
  return {std::move(ds), std::move(adj), std::move(model), batches.front()};
}

}  // namespace testing_support
