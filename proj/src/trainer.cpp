#include "gsau/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace gsau {

template <typename T>
Adam<T>::Adam(NamedTensors<T> params, const AdamConfig& config)
    : params_(std::move(params)), config_(config) {
  for (const auto& [name, p] : params_) {
    first_.push_back(Tensor<T>::zeros(p.shape()));
    second_.push_back(Tensor<T>::zeros(p.shape()));
  }
}

template <typename T>
void Adam<T>::step() {
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double step_size = config_.learning_rate / correction1;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].second;
    const bool has_grad = p.has_grad();
    auto values = p.data_mut();
    auto m = first_[k].data_mut();
    auto v = second_[k].data_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? static_cast<double>(p.grad()[i]) : 0.0;
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double denom = std::sqrt(vi / correction2) + config_.eps;
      values[i] = static_cast<T>(static_cast<double>(values[i]) - step_size * mi / denom);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
NamedTensors<T> Adam<T>::state() const {
  NamedTensors<T> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.emplace_back("opt/m/" + params_[k].first, first_[k]);
    out.emplace_back("opt/v/" + params_[k].first, second_[k]);
  }
  return out;
}

bool TrainState::record_epoch(double ndcg) {
  ++epoch;
  if (ndcg > best_ndcg) {
    best_ndcg = ndcg;
    best_epoch = epoch;
    epochs_since_best = 0;
    return true;
  }
  ++epochs_since_best;
  return false;
}

bool TrainState::should_stop(std::size_t max_epochs, std::size_t patience) const {
  return epochs_since_best >= patience || epoch >= max_epochs;
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch, std::uint64_t stream) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(epoch) * 4 + stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
LossBreakdown<T> train_step(GsauModel<T>& model, Adam<T>& optimizer, const Batch& batch,
                            const SparseMatrix& adj, const Dataset& dataset, const LossConfig& loss,
                            std::mt19937_64& rng, double clip_norm) {
  auto& tape = Tape<T>::active();
  tape.clear();
  optimizer.zero_grad();
  LossBreakdown<T> breakdown;
  try {
    breakdown = compute_loss(model, batch, adj, dataset, loss, true, &rng);
  } catch (const NumericError& e) {
    tape.clear();
    throw NumericError(std::string("train_step: ") + e.what());
  }
  backward(breakdown.total);
  tape.clear();

  if (clip_norm > 0.0) {
    double sq = 0.0;
    for (auto& [name, p] : model.parameters()) {
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) {
      const T factor = static_cast<T>(clip_norm / norm);
      for (auto& [name, p] : model.parameters()) {
        if (!p.has_grad()) continue;
        for (auto& g : p.grad_mut()) g *= factor;
      }
    }
  }
  optimizer.step();
  return breakdown;
}

template <typename T>
MetricsReport evaluate_model(const GsauModel<T>& model, const Dataset& dataset, const SparseMatrix& adj,
                             const LossConfig& loss, const TrainerConfig& config, Split split,
                             const std::vector<std::size_t>& ks) {
  ModelScorer<T> scorer(model, adj, loss, config.head, config.max_seq_len);
  EvalOptions options;
  options.ks = ks;
  options.threads = config.eval_threads;
  return evaluate(
      dataset, split,
      [&](std::span<const std::size_t> users, const std::vector<std::vector<std::int32_t>>& histories,
          std::vector<double>& scores) { scorer.score(users, histories, scores); },
      options);
}

template <typename T>
FitResult<T> fit(GsauModel<T>& model, Adam<T>& optimizer, const Dataset& dataset, const SparseMatrix& adj,
                 const LossConfig& loss, const TrainerConfig& config, TrainState state,
                 const std::function<void(const EpochRecord&, const TrainState&)>& on_epoch) {
  loss.validate();
  FitResult<T> result{model.clone(), state, {}};
  std::vector<std::size_t> ks{10, 20, 50};
  if (std::find(ks.begin(), ks.end(), config.early_stop_k) == ks.end()) {
    ks.push_back(config.early_stop_k);
    std::sort(ks.begin(), ks.end());
  }

  while (!result.state.should_stop(config.max_epochs, config.patience)) {
    const std::size_t epoch = result.state.epoch + 1;
    auto batches = make_batches(dataset, config.batch_size, config.max_seq_len,
                                epoch_seed(config.seed, epoch, 0), config.instances);
    std::mt19937_64 rng(epoch_seed(config.seed, epoch, 1));
    EpochRecord record;
    record.epoch = epoch;
    for (const auto& batch : batches) {
      auto b = train_step(model, optimizer, batch, adj, dataset, loss, rng, config.clip_norm);
      record.loss.graph_alignment += b.graph_alignment;
      record.loss.sequential += b.sequential;
      record.loss.graph_uniformity += b.graph_uniformity;
      record.loss.sequential_uniformity += b.sequential_uniformity;
      record.loss.total += b.total_value;
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, batches.size()));
    record.loss.graph_alignment /= n;
    record.loss.sequential /= n;
    record.loss.graph_uniformity /= n;
    record.loss.sequential_uniformity /= n;
    record.loss.total /= n;

    record.validation = evaluate_model(model, dataset, adj, loss, config, Split::Validation, ks);
    record.validation.epoch = static_cast<long>(epoch);
    record.improved = result.state.record_epoch(record.validation.ndcg.at(config.early_stop_k));
    if (record.improved) result.best_model.copy_values_from(model);
    result.history.push_back(record);
    if (on_epoch) on_epoch(record, result.state);
  }
  return result;
}

// ---- checkpoint I/O --------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'G', 'S', 'A', 'U'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("checkpoint '" + path + "' is truncated");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint32_t> words;  // f32 bit patterns
};

void write_tensor(std::ostream& out, const std::string& name, const std::vector<std::uint32_t>& dims,
                  const std::vector<std::uint32_t>& words) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_u32(out, d);
  for (auto w : words) put_u32(out, w);
}

template <typename T>
std::vector<std::uint32_t> float_words(const Tensor<T>& t) {
  std::vector<std::uint32_t> words;
  words.reserve(t.size());
  for (T v : t.data()) words.push_back(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return words;
}

std::vector<std::uint32_t> dims_of(const Shape& shape) {
  return std::vector<std::uint32_t>(shape.begin(), shape.end());
}

void push_u64(std::vector<std::uint32_t>& words, std::uint64_t v) {
  words.push_back(static_cast<std::uint32_t>(v));
  words.push_back(static_cast<std::uint32_t>(v >> 32));
}

std::uint64_t pop_u64(const std::vector<std::uint32_t>& words, std::size_t at) {
  return static_cast<std::uint64_t>(words.at(at)) | static_cast<std::uint64_t>(words.at(at + 1)) << 32;
}

template <typename T>
void assign_tensor(Tensor<T>& dst, const std::string& name, const RawTensor& raw) {
  if (raw.dims != dims_of(dst.shape())) {
    Shape got(raw.dims.begin(), raw.dims.end());
    throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(got) + ", model expects " +
                     shape_str(dst.shape()));
  }
  auto values = dst.data_mut();
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<T>(std::bit_cast<float>(raw.words[i]));
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const GsauModel<T>& model, const Adam<T>* optimizer,
                     const TrainState* state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  NamedTensors<T> tensors = model.parameters();
  if (optimizer) {
    for (auto& entry : optimizer->state()) tensors.push_back(std::move(entry));
  }
  std::uint32_t count = static_cast<std::uint32_t>(tensors.size());
  if (optimizer) ++count;
  if (state) ++count;

  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, count);
  for (const auto& [name, t] : tensors) write_tensor(out, name, dims_of(t.shape()), float_words(t));
  if (optimizer) {
    std::vector<std::uint32_t> words;
    push_u64(words, optimizer->steps());
    write_tensor(out, "opt/step", {2}, words);
  }
  if (state) {
    std::vector<std::uint32_t> words;
    push_u64(words, state->epoch);
    push_u64(words, std::bit_cast<std::uint64_t>(state->best_ndcg));
    push_u64(words, state->best_epoch);
    push_u64(words, state->epochs_since_best);
    write_tensor(out, "state/train", {8}, words);
  }
  if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, GsauModel<T>& model, Adam<T>* optimizer,
                     TrainState* state) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + p + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("'" + p + "' is not a checkpoint (bad magic)");
  }
  const auto version = get_u32(in, p);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint '" + p + "' has format version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const auto count = get_u32(in, p);
  std::map<std::string, RawTensor> raw;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = get_u32(in, p);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw DataError("checkpoint '" + p + "' is truncated");
    RawTensor t;
    const auto rank = get_u32(in, p);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(get_u32(in, p));
      n *= t.dims.back();
    }
    t.words.resize(n);
    for (auto& w : t.words) w = get_u32(in, p);
    raw.emplace(std::move(name), std::move(t));
  }

  auto take = [&](const std::string& name) -> const RawTensor& {
    auto it = raw.find(name);
    if (it == raw.end()) throw DataError("checkpoint '" + p + "' lacks tensor '" + name + "'");
    return it->second;
  };
  for (auto& [name, t] : model.parameters()) assign_tensor(t, name, take(name));
  if (optimizer) {
    for (auto& [name, t] : optimizer->state()) assign_tensor(t, name, take(name));
    optimizer->set_steps(pop_u64(take("opt/step").words, 0));
  }
  if (state) {
    const auto& words = take("state/train").words;
    state->epoch = pop_u64(words, 0);
    state->best_ndcg = std::bit_cast<double>(pop_u64(words, 2));
    state->best_epoch = pop_u64(words, 4);
    state->epochs_since_best = pop_u64(words, 6);
  }
}

template class Adam<float>;
template class Adam<double>;

#define GSAU_INSTANTIATE_TRAINER(T)                                                                   \
  template LossBreakdown<T> train_step(GsauModel<T>&, Adam<T>&, const Batch&, const SparseMatrix&,    \
                                       const Dataset&, const LossConfig&, std::mt19937_64&, double);  \
  template MetricsReport evaluate_model(const GsauModel<T>&, const Dataset&, const SparseMatrix&,     \
                                        const LossConfig&, const TrainerConfig&, Split,               \
                                        const std::vector<std::size_t>&);                             \
  template FitResult<T> fit(GsauModel<T>&, Adam<T>&, const Dataset&, const SparseMatrix&,             \
                            const LossConfig&, const TrainerConfig&, TrainState,                      \
                            const std::function<void(const EpochRecord&, const TrainState&)>&);                          \
  template void save_checkpoint(const std::filesystem::path&, const GsauModel<T>&, const Adam<T>*,    \
                                const TrainState*);                                                   \
  template void load_checkpoint(const std::filesystem::path&, GsauModel<T>&, Adam<T>*, TrainState*);

GSAU_INSTANTIATE_TRAINER(float)
GSAU_INSTANTIATE_TRAINER(double)

#undef GSAU_INSTANTIATE_TRAINER

}  // namespace gsau
