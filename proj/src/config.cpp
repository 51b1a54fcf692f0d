#include "gsau/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>

#include "gsau/errors.hpp"

namespace gsau {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_uint(key, value));
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::string format_log_format(LogFormat f) { return f == LogFormat::Tsv ? "tsv" : "csv"; }

struct Entry {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define GSAU_SIZE(name, field, text)                                                                  \
  Entry {                                                                                             \
    name, text, [](RunConfig& c, const std::string& v) { c.field = parse_size(name, v); },            \
        [](const RunConfig& c) { return std::to_string(c.field); }                                    \
  }
#define GSAU_DOUBLE(name, field, text)                                                                \
  Entry {                                                                                             \
    name, text, [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); },          \
        [](const RunConfig& c) { return format_double(c.field); }                                     \
  }
#define GSAU_BOOL(name, field, text)                                                                  \
  Entry {                                                                                             \
    name, text, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); },            \
        [](const RunConfig& c) { return format_bool(c.field); }                                       \
  }
#define GSAU_ENUM(name, field, parse, text)                                                           \
  Entry {                                                                                             \
    name, text, [](RunConfig& c, const std::string& v) { c.field = parse(v); },                       \
        [](const RunConfig& c) { return to_string(c.field); }                                         \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      Entry{"data", "raw interaction log or dataset snapshot",
            [](RunConfig& c, const std::string& v) { c.data.path = v; },
            [](const RunConfig& c) { return c.data.path; }},
      Entry{"format", "log delimiter: tsv or csv",
            [](RunConfig& c, const std::string& v) { c.data.ingest.format = parse_log_format(v); },
            [](const RunConfig& c) { return format_log_format(c.data.ingest.format); }},
      GSAU_SIZE("user_column", data.ingest.user_column, "0-based column of the user id"),
      GSAU_SIZE("item_column", data.ingest.item_column, "0-based column of the item id"),
      GSAU_SIZE("time_column", data.ingest.time_column, "0-based column of the timestamp"),
      GSAU_SIZE("skip_lines", data.ingest.skip_lines, "header lines to skip"),
      GSAU_DOUBLE("max_malformed_fraction", data.ingest.max_malformed_fraction,
                  "abort when more lines than this fraction are malformed"),
      GSAU_SIZE("k_core", data.k_core, "minimum interactions per user and item"),
      GSAU_SIZE("max_history", data.max_history, "keep only each user's most recent N interactions (0 = all)"),
      GSAU_SIZE("max_users", data.max_users, "random subset of users to keep (0 = all)"),
      Entry{"subsample_seed", "seed for max_users sampling",
            [](RunConfig& c, const std::string& v) { c.data.subsample_seed = parse_uint("subsample_seed", v); },
            [](const RunConfig& c) { return std::to_string(c.data.subsample_seed); }},

      GSAU_SIZE("embedding_dim", model.embedding_dim, "embedding size d"),
      GSAU_DOUBLE("init_std", model.init_std, "embedding init standard deviation"),
      GSAU_SIZE("graph_layers", model.graph.num_layers, "propagation layers"),
      GSAU_ENUM("layer_combination", model.graph.combination, parse_layer_combination, "mean or last"),
      GSAU_SIZE("seq_layers", model.seq.num_layers, "transformer blocks"),
      GSAU_SIZE("seq_heads", model.seq.num_heads, "attention heads"),
      GSAU_SIZE("ffn_dim", model.seq.ffn_dim, "feed-forward width"),
      GSAU_SIZE("max_seq_len", model.seq.max_seq_len, "longest prefix fed to the encoder"),
      GSAU_DOUBLE("dropout", model.seq.dropout, "dropout rate in the encoder"),
      GSAU_ENUM("activation", model.seq.activation, parse_activation, "gelu or relu"),

      GSAU_ENUM("variant", loss.variant, parse_variant, "gsau or gsau-rec"),
      GSAU_DOUBLE("gamma", loss.gamma, "uniformity weight"),
      GSAU_BOOL("without_graph", loss.without_graph, "drop the graph encoder"),
      GSAU_BOOL("without_sequential", loss.without_sequential, "drop the sequential encoder"),
      GSAU_BOOL("without_ui_uniform", loss.without_ui_uniform, "drop item-sequence uniformity pairs"),
      GSAU_ENUM("graph_uniformity_pooling", loss.graph_pooling, parse_pooling, "average or union"),
      GSAU_ENUM("sequential_uniformity_pooling", loss.sequential_pooling, parse_pooling, "average or union"),

      GSAU_DOUBLE("learning_rate", trainer.adam.learning_rate, "Adam step size"),
      GSAU_DOUBLE("beta1", trainer.adam.beta1, "Adam first-moment decay"),
      GSAU_DOUBLE("beta2", trainer.adam.beta2, "Adam second-moment decay"),
      GSAU_DOUBLE("adam_eps", trainer.adam.eps, "Adam denominator epsilon"),
      GSAU_SIZE("batch_size", trainer.batch_size, "training instances per batch"),
      GSAU_SIZE("max_epochs", trainer.max_epochs, "epoch limit"),
      GSAU_SIZE("patience", trainer.patience, "epochs without validation gain before stopping"),
      GSAU_SIZE("early_stop_k", trainer.early_stop_k, "cutoff of the validation NDCG used for stopping"),
      GSAU_DOUBLE("clip_norm", trainer.clip_norm, "global gradient norm clip (0 = off)"),
      GSAU_ENUM("train_instances", trainer.instances, parse_instance_mode, "per-prefix or last-only"),
      GSAU_ENUM("scoring_head", trainer.head, parse_scoring_head, "auto, sequential, graph or sum"),
      Entry{"seed", "model and training seed",
            [](RunConfig& c, const std::string& v) { c.trainer.seed = parse_uint("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.trainer.seed); }},
      GSAU_SIZE("eval_threads", trainer.eval_threads, "threads used for ranking"),
      Entry{"output_dir", "run directory",
            [](RunConfig& c, const std::string& v) { c.output_dir = v; },
            [](const RunConfig& c) { return c.output_dir; }},
  };
  return table;
}

#undef GSAU_SIZE
#undef GSAU_DOUBLE
#undef GSAU_BOOL
#undef GSAU_ENUM

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key == key) return e;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
  loss.validate();
  model.seq.validate();
  if (model.seq.hidden_dim != model.embedding_dim) {
    throw ConfigError("encoder width must equal embedding_dim");
  }
  if (model.embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
  if (trainer.batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (trainer.max_seq_len != model.seq.max_seq_len) throw ConfigError("max_seq_len out of sync");
  if (trainer.early_stop_k == 0) throw ConfigError("early_stop_k must be positive");
  if (trainer.adam.learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (trainer.adam.beta1 < 0.0 || trainer.adam.beta1 >= 1.0 || trainer.adam.beta2 < 0.0 ||
      trainer.adam.beta2 >= 1.0) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (trainer.adam.eps <= 0.0) throw ConfigError("adam_eps must be positive");
  if (trainer.clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
  if (data.k_core == 0) throw ConfigError("k_core must be positive");
  if (data.max_history != 0 && data.max_history < 3) {
    throw ConfigError("max_history must keep at least 3 interactions");
  }
  const auto& in = data.ingest;
  if (in.user_column == in.item_column || in.user_column == in.time_column || in.item_column == in.time_column) {
    throw ConfigError("user, item and time columns must differ");
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "without_rec") {
    // Alias: the rec ablation is the alignment-only variant.
    if (parse_bool(key, value)) loss.variant = Variant::Gsau;
    return;
  }
  find_entry(key).set(*this, value);
  if (key == "embedding_dim") model.seq.hidden_dim = model.embedding_dim;
  if (key == "max_seq_len") trainer.max_seq_len = model.seq.max_seq_len;
}

std::string RunConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return names;
}

std::string RunConfig::describe(const std::string& key) { return find_entry(key).help; }

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& e : entries()) os << e.key << " = " << e.get(*this) << '\n';
  return os.str();
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& e : entries()) {
    if (e.key == "output_dir") continue;
    for (char ch : e.key + "=" + e.get(*this) + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::map<std::string, std::string> parse_config_text(std::istream& in, const std::string& source) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(number) + ": empty key");
    if (!out.emplace(key, value).second) {
      throw ConfigError(source + ":" + std::to_string(number) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  for (const auto& [key, value] : parse_config_text(in, path.string())) {
    try {
      config.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
}

Dataset load_dataset(const DataConfig& config, IngestReport* report) {
  if (config.path.empty()) throw ConfigError("no dataset path given");
  if (Dataset::is_snapshot(config.path)) return Dataset::load_snapshot(config.path);
  auto interactions = ingest(config.path, config.ingest, report);
  if (config.max_users > 0) interactions = subsample_users(std::move(interactions), config.max_users, config.subsample_seed);
  if (config.max_history > 0) interactions = truncate_histories(std::move(interactions), config.max_history);
  interactions = five_core_filter(std::move(interactions), config.k_core);
  return Dataset::from_interactions(interactions);
}

}  // namespace gsau
