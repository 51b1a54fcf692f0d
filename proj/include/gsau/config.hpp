#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include "gsau/au_loss.hpp"
#include "gsau/dataset.hpp"
#include "gsau/model.hpp"
#include "gsau/trainer.hpp"

namespace gsau {

struct DataConfig {
  std::string path;  // raw log or dataset snapshot
  IngestOptions ingest;
  std::size_t k_core = 5;
  std::size_t max_history = 0;  // 0 keeps full histories
  std::size_t max_users = 0;    // 0 keeps every user
  std::uint64_t subsample_seed = 0;
};

/// Everything a run needs; every field has a flat key.
struct RunConfig {
  DataConfig data;
  ModelConfig model;
  LossConfig loss;
  TrainerConfig trainer;
  std::string output_dir = "runs/default";

  /// Rejects inconsistent settings with ConfigError.
  void validate() const;

  /// Sets one field from its flat key. Unknown keys and unparsable values
  /// throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// All keys in a fixed order.
  static const std::vector<std::string>& keys();
  /// One-line description of a key for --help output.
  static std::string describe(const std::string& key);

  /// `key = value` lines for every key.
  std::string to_text() const;
  /// FNV-1a over to_text(), excluding output_dir.
  std::string hash() const;
};

/// Reads `key = value` lines; `#` starts a comment, blank lines are skipped.
std::map<std::string, std::string> parse_config_text(std::istream& in, const std::string& source);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Ingests or loads a snapshot per `config`. Raw logs go through user
/// subsampling and history truncation before k-core filtering, so the result
/// always satisfies the k-core property.
Dataset load_dataset(const DataConfig& config, IngestReport* report = nullptr);

}  // namespace gsau
