#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "gsau/au_loss.hpp"
#include "gsau/dataset.hpp"
#include "gsau/evaluator.hpp"
#include "gsau/model.hpp"

namespace gsau {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of parameters.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(NamedTensors<T> params, const AdamConfig& config);

  /// One update from the parameters' current gradients; parameters without
  /// a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }

  /// First and second moments as "opt/m/<name>" and "opt/v/<name>".
  NamedTensors<T> state() const;
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 private:
  NamedTensors<T> params_;
  std::vector<Tensor<T>> first_;
  std::vector<Tensor<T>> second_;
  AdamConfig config_;
  std::uint64_t steps_ = 0;
};

struct TrainerConfig {
  AdamConfig adam;
  std::size_t batch_size = 1024;
  std::size_t max_seq_len = 50;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::size_t early_stop_k = 20;
  double clip_norm = 0.0;  // 0 disables gradient clipping
  InstanceMode instances = InstanceMode::PerPrefix;
  ScoringHead head = ScoringHead::Auto;
  std::uint64_t seed = 42;
  std::size_t eval_threads = 1;
};

struct TrainState {
  std::size_t epoch = 0;  // epochs completed
  double best_ndcg = -1.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_best = 0;

  /// Advances after an epoch with validation NDCG `ndcg`; true on improvement.
  bool record_epoch(double ndcg);
  bool should_stop(std::size_t max_epochs, std::size_t patience) const;
};

struct LossMeans {
  double graph_alignment = 0.0;
  double sequential = 0.0;
  double graph_uniformity = 0.0;
  double sequential_uniformity = 0.0;
  double total = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  LossMeans loss;
  MetricsReport validation;
  bool improved = false;
};

/// Forward, backward and one Adam update. Throws NumericError with the
/// component losses when the objective is not finite.
template <typename T>
LossBreakdown<T> train_step(GsauModel<T>& model, Adam<T>& optimizer, const Batch& batch,
                            const SparseMatrix& adj, const Dataset& dataset, const LossConfig& loss,
                            std::mt19937_64& rng, double clip_norm = 0.0);

template <typename T>
struct FitResult {
  GsauModel<T> best_model;
  TrainState state;
  std::vector<EpochRecord> history;
};

template <typename T>
MetricsReport evaluate_model(const GsauModel<T>& model, const Dataset& dataset, const SparseMatrix& adj,
                             const LossConfig& loss, const TrainerConfig& config, Split split,
                             const std::vector<std::size_t>& ks = {10, 20, 50});

/// Epoch loop with validation NDCG@k early stopping. Continues from
/// `state`/`optimizer` when resuming; per-epoch randomness derives from
/// (seed, epoch) so a resumed run replays the same batches.
template <typename T>
FitResult<T> fit(GsauModel<T>& model, Adam<T>& optimizer, const Dataset& dataset, const SparseMatrix& adj,
                 const LossConfig& loss, const TrainerConfig& config, TrainState state = {},
                 const std::function<void(const EpochRecord&, const TrainState&)>& on_epoch = {});

/// Seed for epoch-level randomness (shuffle, dropout).
std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch, std::uint64_t stream);

constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes parameters, optimizer moments (under "opt/") and the train state.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const GsauModel<T>& model,
                     const Adam<T>* optimizer = nullptr, const TrainState* state = nullptr);

/// Restores into an already-constructed model of matching structure.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, GsauModel<T>& model, Adam<T>* optimizer = nullptr,
                     TrainState* state = nullptr);

}  // namespace gsau
