#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "gsau/sparse.hpp"

namespace gsau {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
  std::size_t position = 0;  // record order in the source, used for tie-breaks
};

enum class LogFormat { Tsv, Csv };

LogFormat parse_log_format(const std::string& name);

struct IngestOptions {
  LogFormat format = LogFormat::Tsv;
  std::size_t user_column = 0;
  std::size_t item_column = 1;
  std::size_t time_column = 2;
  std::size_t skip_lines = 0;
  double max_malformed_fraction = 0.01;
};

struct IngestReport {
  std::size_t lines = 0;
  std::size_t malformed = 0;
  std::size_t duplicates = 0;
  std::vector<std::string> offenders;  // first few malformed lines, "line N: text"
};

/// Parses delimited (user, item, timestamp) records. Repeated (user, item)
/// pairs keep only the earliest timestamp.
std::vector<Interaction> parse_interactions(std::istream& in, const IngestOptions& options,
                                            IngestReport* report = nullptr);
std::vector<Interaction> ingest(const std::filesystem::path& path, const IngestOptions& options,
                                IngestReport* report = nullptr);

/// Repeatedly drops users and items with fewer than `k` interactions until
/// none remain. Throws DataError if nothing survives.
std::vector<Interaction> five_core_filter(std::vector<Interaction> interactions,
                                          std::size_t k = 5);

/// Keeps each user's `keep_last` most recent interactions.
std::vector<Interaction> truncate_histories(std::vector<Interaction> interactions,
                                            std::size_t keep_last);
/// Keeps a seeded random subset of `max_users` users.
std::vector<Interaction> subsample_users(std::vector<Interaction> interactions,
                                         std::size_t max_users, std::uint64_t seed);

struct TimedItem {
  std::int32_t item = 0;
  std::int64_t timestamp = 0;
};

struct UserSplit {
  std::vector<std::int32_t> train;
  std::int32_t validation = -1;
  std::int32_t test = -1;
};

/// Last item -> test, second to last -> validation, the rest -> train.
/// Sequences must already be chronological and hold at least 3 items.
std::vector<UserSplit> leave_one_out_split(const std::vector<std::vector<TimedItem>>& sequences);

class Dataset {
 public:
  /// Assigns dense ids in order of first appearance and sorts each user's
  /// history by (timestamp, source position).
  static Dataset from_interactions(const std::vector<Interaction>& interactions);

  std::size_t num_users() const { return user_vocab_.size(); }
  std::size_t num_items() const { return item_vocab_.size(); }
  std::size_t num_interactions() const;

  const std::vector<std::string>& user_vocab() const { return user_vocab_; }
  const std::vector<std::string>& item_vocab() const { return item_vocab_; }
  std::int64_t user_index(const std::string& external) const;
  std::int64_t item_index(const std::string& external) const;

  const std::vector<std::vector<TimedItem>>& sequences() const { return sequences_; }
  const std::vector<UserSplit>& splits() const { return splits_; }
  const UserSplit& split(std::size_t user) const { return splits_[user]; }

  /// Observed (user, item) pairs of the train split.
  std::vector<std::pair<std::int32_t, std::int32_t>> train_pairs() const;
  /// Whether `item` is in the user's train split.
  bool in_train(std::size_t user, std::int32_t item) const;

  /// 64-bit FNV-1a over vocabularies and sequences, hex encoded.
  std::string fingerprint() const;

  void save_snapshot(const std::filesystem::path& path) const;
  static Dataset load_snapshot(const std::filesystem::path& path);
  static bool is_snapshot(const std::filesystem::path& path);

 private:
  void rebuild_derived();

  std::vector<std::string> user_vocab_;
  std::vector<std::string> item_vocab_;
  std::unordered_map<std::string, std::int64_t> user_lookup_;
  std::unordered_map<std::string, std::int64_t> item_lookup_;
  std::vector<std::vector<TimedItem>> sequences_;
  std::vector<UserSplit> splits_;
  std::vector<std::vector<std::int32_t>> sorted_train_;
};

/// Symmetric (N+M)x(N+M) matrix with entry 1/sqrt(deg(u) deg(i)) at every
/// train edge, users first. Isolated nodes get empty rows.
SparseMatrix build_normalized_adjacency(
    const std::vector<std::pair<std::int32_t, std::int32_t>>& train_pairs, std::size_t num_users,
    std::size_t num_items);

enum class InstanceMode { PerPrefix, LastOnly };

InstanceMode parse_instance_mode(const std::string& name);
std::string to_string(InstanceMode mode);

/// Target position `position` (>= 1) in the user's train sequence.
struct TrainingInstance {
  std::uint32_t user = 0;
  std::uint32_t position = 0;
};

struct Batch {
  std::vector<std::size_t> users;
  std::size_t width = 0;                 // padded prefix length
  std::vector<std::int64_t> prefix;      // users.size() x width, left padded with -1
  std::vector<std::uint8_t> valid;       // 1 where prefix holds an item
  std::vector<std::int32_t> targets;
  std::vector<std::size_t> lengths;

  std::size_t size() const { return users.size(); }
};

std::vector<TrainingInstance> training_instances(const Dataset& dataset, InstanceMode mode);

/// Builds one batch; each prefix keeps at most `max_seq_len` most recent items.
Batch make_batch(const Dataset& dataset, const std::vector<TrainingInstance>& instances,
                 std::size_t max_seq_len);

/// Left-padded prefix batch from explicit item histories (evaluation path).
Batch make_history_batch(const std::vector<std::size_t>& users,
                         const std::vector<std::vector<std::int32_t>>& histories,
                         std::size_t max_seq_len);

/// All instances of one epoch, shuffled by `seed`. A trailing batch smaller
/// than 2 is merged into its predecessor.
std::vector<Batch> make_batches(const Dataset& dataset, std::size_t batch_size,
                                std::size_t max_seq_len, std::uint64_t seed,
                                InstanceMode mode = InstanceMode::PerPrefix);

}  // namespace gsau
