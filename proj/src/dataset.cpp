#include "gsau/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "gsau/errors.hpp"

namespace gsau {

namespace {

constexpr const char* kSnapshotMagic = "GSAU-DATASET";
constexpr int kSnapshotVersion = 1;

std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_timestamp(std::string_view s, std::int64_t& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec == std::errc() && ptr == s.data() + s.size()) return true;
  // Accept float-formatted integers such as "881250949.0".
  std::string copy(s);
  char* end = nullptr;
  const double v = std::strtod(copy.c_str(), &end);
  if (end != copy.c_str() + copy.size() || !std::isfinite(v) || std::fabs(v) > 9.0e18) return false;
  out = std::llround(v);
  return true;
}

void fnv_mix(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
}

}  // namespace

LogFormat parse_log_format(const std::string& name) {
  if (name == "tsv") return LogFormat::Tsv;
  if (name == "csv") return LogFormat::Csv;
  throw ConfigError("unknown log format '" + name + "' (expected tsv or csv)");
}

std::vector<Interaction> parse_interactions(std::istream& in, const IngestOptions& options,
                                            IngestReport* report) {
  const char delim = options.format == LogFormat::Tsv ? '\t' : ',';
  const std::size_t needed =
      std::max({options.user_column, options.item_column, options.time_column}) + 1;

  IngestReport local;
  IngestReport& rep = report ? *report : local;
  rep = IngestReport{};

  std::vector<Interaction> records;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  std::size_t position = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no <= options.skip_lines) continue;
    std::string_view view = trim(line);
    if (view.empty()) continue;
    ++rep.lines;
    auto fields = split_fields(view, delim);
    std::int64_t ts = 0;
    bool ok = fields.size() >= needed;
    std::string_view user, item;
    if (ok) {
      user = trim(fields[options.user_column]);
      item = trim(fields[options.item_column]);
      ok = !user.empty() && !item.empty() && parse_timestamp(trim(fields[options.time_column]), ts);
    }
    if (!ok) {
      ++rep.malformed;
      if (rep.offenders.size() < 5) rep.offenders.push_back("line " + std::to_string(line_no) + ": " + line);
      continue;
    }
    Interaction rec{std::string(user), std::string(item), ts, position++};
    std::string key = rec.user;
    key.push_back('\x1f');
    key += rec.item;
    auto [it, inserted] = seen.emplace(std::move(key), records.size());
    if (inserted) {
      records.push_back(std::move(rec));
    } else {
      ++rep.duplicates;
      auto& kept = records[it->second];
      if (rec.timestamp < kept.timestamp) {
        kept.timestamp = rec.timestamp;
        kept.position = rec.position;
      }
    }
  }

  if (rep.lines > 0 &&
      static_cast<double>(rep.malformed) > options.max_malformed_fraction * static_cast<double>(rep.lines)) {
    std::ostringstream os;
    os << rep.malformed << " of " << rep.lines << " lines are malformed; first offenders:";
    for (const auto& o : rep.offenders) os << "\n  " << o;
    throw DataError(os.str());
  }
  if (records.empty()) throw DataError("no interactions");
  return records;
}

std::vector<Interaction> ingest(const std::filesystem::path& path, const IngestOptions& options,
                                IngestReport* report) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read interaction log '" + path.string() + "'");
  return parse_interactions(in, options, report);
}

std::vector<Interaction> five_core_filter(std::vector<Interaction> interactions, std::size_t k) {
  if (interactions.empty()) throw DataError("five_core_filter: empty input");
  while (true) {
    std::unordered_map<std::string, std::size_t> user_deg, item_deg;
    for (const auto& r : interactions) {
      ++user_deg[r.user];
      ++item_deg[r.item];
    }
    const auto before = interactions.size();
    std::erase_if(interactions, [&](const Interaction& r) {
      return user_deg[r.user] < k || item_deg[r.item] < k;
    });
    if (interactions.size() == before) break;
  }
  if (interactions.empty()) {
    throw DataError("no interactions survive " + std::to_string(k) + "-core filtering");
  }
  return interactions;
}

std::vector<Interaction> truncate_histories(std::vector<Interaction> interactions,
                                            std::size_t keep_last) {
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < interactions.size(); ++i) by_user[interactions[i].user].push_back(i);
  std::vector<std::uint8_t> keep(interactions.size(), 1);
  for (auto& [user, idx] : by_user) {
    if (idx.size() <= keep_last) continue;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto& ra = interactions[a];
      const auto& rb = interactions[b];
      return ra.timestamp != rb.timestamp ? ra.timestamp < rb.timestamp : ra.position < rb.position;
    });
    for (std::size_t j = 0; j + keep_last < idx.size(); ++j) keep[idx[j]] = 0;
  }
  std::vector<Interaction> out;
  for (std::size_t i = 0; i < interactions.size(); ++i) {
    if (keep[i]) out.push_back(std::move(interactions[i]));
  }
  return out;
}

std::vector<Interaction> subsample_users(std::vector<Interaction> interactions,
                                         std::size_t max_users, std::uint64_t seed) {
  std::vector<std::string> users;
  std::unordered_map<std::string, bool> chosen;
  for (const auto& r : interactions) {
    if (chosen.emplace(r.user, false).second) users.push_back(r.user);
  }
  if (users.size() <= max_users) return interactions;
  std::mt19937_64 rng(seed);
  std::shuffle(users.begin(), users.end(), rng);
  for (std::size_t i = 0; i < max_users; ++i) chosen[users[i]] = true;
  std::erase_if(interactions, [&](const Interaction& r) { return !chosen[r.user]; });
  return interactions;
}

std::vector<UserSplit> leave_one_out_split(const std::vector<std::vector<TimedItem>>& sequences) {
  std::vector<UserSplit> splits(sequences.size());
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    const auto& seq = sequences[u];
    if (seq.size() < 3) {
      throw DataError("user " + std::to_string(u) + " has " + std::to_string(seq.size()) +
                      " interactions; leave-one-out needs at least 3");
    }
    auto& s = splits[u];
    s.test = seq.back().item;
    s.validation = seq[seq.size() - 2].item;
    s.train.reserve(seq.size() - 2);
    for (std::size_t t = 0; t + 2 < seq.size(); ++t) s.train.push_back(seq[t].item);
  }
  return splits;
}

Dataset Dataset::from_interactions(const std::vector<Interaction>& interactions) {
  if (interactions.empty()) throw DataError("no interactions");
  Dataset ds;
  std::vector<const Interaction*> order;
  order.reserve(interactions.size());
  for (const auto& r : interactions) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(),
                   [](const Interaction* a, const Interaction* b) { return a->position < b->position; });

  struct Entry {
    std::int32_t item;
    std::int64_t ts;
    std::size_t pos;
  };
  std::vector<std::vector<Entry>> per_user;
  for (const auto* r : order) {
    auto [uit, unew] = ds.user_lookup_.emplace(r->user, static_cast<std::int64_t>(ds.user_vocab_.size()));
    if (unew) {
      ds.user_vocab_.push_back(r->user);
      per_user.emplace_back();
    }
    auto [iit, inew] = ds.item_lookup_.emplace(r->item, static_cast<std::int64_t>(ds.item_vocab_.size()));
    if (inew) ds.item_vocab_.push_back(r->item);
    per_user[static_cast<std::size_t>(uit->second)].push_back(
        {static_cast<std::int32_t>(iit->second), r->timestamp, r->position});
  }
  ds.sequences_.resize(per_user.size());
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& entries = per_user[u];
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.ts != b.ts ? a.ts < b.ts : a.pos < b.pos;
    });
    for (const auto& e : entries) ds.sequences_[u].push_back({e.item, e.ts});
  }
  ds.rebuild_derived();
  return ds;
}

void Dataset::rebuild_derived() {
  splits_ = leave_one_out_split(sequences_);
  sorted_train_.clear();
  for (const auto& s : splits_) {
    auto v = s.train;
    std::sort(v.begin(), v.end());
    sorted_train_.push_back(std::move(v));
  }
}

std::size_t Dataset::num_interactions() const {
  std::size_t n = 0;
  for (const auto& s : sequences_) n += s.size();
  return n;
}

std::int64_t Dataset::user_index(const std::string& external) const {
  auto it = user_lookup_.find(external);
  return it == user_lookup_.end() ? -1 : it->second;
}

std::int64_t Dataset::item_index(const std::string& external) const {
  auto it = item_lookup_.find(external);
  return it == item_lookup_.end() ? -1 : it->second;
}

std::vector<std::pair<std::int32_t, std::int32_t>> Dataset::train_pairs() const {
  std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
  for (std::size_t u = 0; u < splits_.size(); ++u) {
    for (auto i : splits_[u].train) pairs.emplace_back(static_cast<std::int32_t>(u), i);
  }
  return pairs;
}

bool Dataset::in_train(std::size_t user, std::int32_t item) const {
  const auto& v = sorted_train_[user];
  return std::binary_search(v.begin(), v.end(), item);
}

std::string Dataset::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* vocab : {&user_vocab_, &item_vocab_}) {
    for (const auto& id : *vocab) {
      fnv_mix(h, id.data(), id.size());
      fnv_mix(h, "\n", 1);
    }
    fnv_mix(h, "#", 1);
  }
  for (const auto& seq : sequences_) {
    for (const auto& e : seq) {
      fnv_mix(h, &e.item, sizeof e.item);
      fnv_mix(h, &e.timestamp, sizeof e.timestamp);
    }
    fnv_mix(h, "|", 1);
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void Dataset::save_snapshot(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write snapshot '" + path.string() + "'");
  out << kSnapshotMagic << ' ' << kSnapshotVersion << '\n';
  out << "users " << user_vocab_.size() << '\n';
  for (const auto& u : user_vocab_) out << u << '\n';
  out << "items " << item_vocab_.size() << '\n';
  for (const auto& i : item_vocab_) out << i << '\n';
  out << "sequences\n";
  for (const auto& seq : sequences_) {
    out << seq.size();
    for (const auto& e : seq) out << ' ' << e.item << ':' << e.timestamp;
    out << '\n';
  }
  if (!out) throw DataError("failed writing snapshot '" + path.string() + "'");
}

bool Dataset::is_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string magic;
  return in && (in >> magic) && magic == kSnapshotMagic;
}

Dataset Dataset::load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read snapshot '" + path.string() + "'");
  auto fail = [&](const std::string& what) -> DataError {
    return DataError("snapshot '" + path.string() + "': " + what);
  };
  std::string magic, word, line;
  int version = 0;
  if (!(in >> magic >> version) || magic != kSnapshotMagic) throw fail("bad magic");
  if (version != kSnapshotVersion) throw fail("unsupported version " + std::to_string(version));

  Dataset ds;
  std::size_t n = 0;
  if (!(in >> word >> n) || word != "users") throw fail("missing user table");
  std::getline(in, line);
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::getline(in, line)) throw fail("truncated user table");
    ds.user_lookup_.emplace(line, static_cast<std::int64_t>(k));
    ds.user_vocab_.push_back(line);
  }
  if (!(in >> word >> n) || word != "items") throw fail("missing item table");
  std::getline(in, line);
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::getline(in, line)) throw fail("truncated item table");
    ds.item_lookup_.emplace(line, static_cast<std::int64_t>(k));
    ds.item_vocab_.push_back(line);
  }
  if (!(in >> word) || word != "sequences") throw fail("missing sequences");
  ds.sequences_.resize(ds.user_vocab_.size());
  for (auto& seq : ds.sequences_) {
    std::size_t len = 0;
    if (!(in >> len)) throw fail("truncated sequences");
    seq.resize(len);
    for (auto& e : seq) {
      char colon = 0;
      if (!(in >> e.item >> colon >> e.timestamp) || colon != ':') throw fail("bad sequence entry");
      if (e.item < 0 || static_cast<std::size_t>(e.item) >= ds.item_vocab_.size()) {
        throw fail("item index out of range");
      }
    }
  }
  ds.rebuild_derived();
  return ds;
}

SparseMatrix build_normalized_adjacency(
    const std::vector<std::pair<std::int32_t, std::int32_t>>& train_pairs, std::size_t num_users,
    std::size_t num_items) {
  std::vector<double> user_deg(num_users, 0.0), item_deg(num_items, 0.0);
  for (auto [u, i] : train_pairs) {
    if (u < 0 || i < 0 || static_cast<std::size_t>(u) >= num_users ||
        static_cast<std::size_t>(i) >= num_items) {
      throw DataError("train pair (" + std::to_string(u) + ", " + std::to_string(i) + ") out of range");
    }
    user_deg[static_cast<std::size_t>(u)] += 1.0;
    item_deg[static_cast<std::size_t>(i)] += 1.0;
  }
  std::vector<Triplet> triplets;
  triplets.reserve(train_pairs.size() * 2);
  for (auto [u, i] : train_pairs) {
    const auto uu = static_cast<std::size_t>(u);
    const auto ii = static_cast<std::size_t>(i);
    const double w = 1.0 / std::sqrt(user_deg[uu] * item_deg[ii]);
    triplets.push_back({uu, num_users + ii, w});
    triplets.push_back({num_users + ii, uu, w});
  }
  return SparseMatrix::from_triplets(num_users + num_items, num_users + num_items, std::move(triplets));
}

InstanceMode parse_instance_mode(const std::string& name) {
  if (name == "per-prefix") return InstanceMode::PerPrefix;
  if (name == "last-only") return InstanceMode::LastOnly;
  throw ConfigError("unknown train-instances mode '" + name + "' (expected per-prefix or last-only)");
}

std::string to_string(InstanceMode mode) {
  return mode == InstanceMode::PerPrefix ? "per-prefix" : "last-only";
}

std::vector<TrainingInstance> training_instances(const Dataset& dataset, InstanceMode mode) {
  std::vector<TrainingInstance> out;
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    const auto len = dataset.split(u).train.size();
    if (len < 2) continue;
    if (mode == InstanceMode::LastOnly) {
      out.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(len - 1)});
    } else {
      for (std::size_t t = 1; t < len; ++t) {
        out.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(t)});
      }
    }
  }
  return out;
}

Batch make_history_batch(const std::vector<std::size_t>& users,
                         const std::vector<std::vector<std::int32_t>>& histories,
                         std::size_t max_seq_len) {
  Batch b;
  b.users = users;
  for (const auto& h : histories) {
    if (h.empty()) throw DataError("empty history in batch");
    b.lengths.push_back(std::min(h.size(), max_seq_len));
    b.width = std::max(b.width, b.lengths.back());
  }
  b.prefix.assign(users.size() * b.width, -1);
  b.valid.assign(users.size() * b.width, 0);
  for (std::size_t r = 0; r < histories.size(); ++r) {
    const auto& h = histories[r];
    const std::size_t len = b.lengths[r];
    const std::size_t pad = b.width - len;
    for (std::size_t j = 0; j < len; ++j) {
      b.prefix[r * b.width + pad + j] = h[h.size() - len + j];
      b.valid[r * b.width + pad + j] = 1;
    }
  }
  return b;
}

Batch make_batch(const Dataset& dataset, const std::vector<TrainingInstance>& instances,
                 std::size_t max_seq_len) {
  std::vector<std::size_t> users;
  std::vector<std::vector<std::int32_t>> prefixes;
  std::vector<std::int32_t> targets;
  for (const auto& inst : instances) {
    const auto& train = dataset.split(inst.user).train;
    users.push_back(inst.user);
    prefixes.emplace_back(train.begin(), train.begin() + inst.position);
    targets.push_back(train[inst.position]);
  }
  Batch b = make_history_batch(users, prefixes, max_seq_len);
  b.targets = std::move(targets);
  return b;
}

std::vector<Batch> make_batches(const Dataset& dataset, std::size_t batch_size,
                                std::size_t max_seq_len, std::uint64_t seed, InstanceMode mode) {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  auto instances = training_instances(dataset, mode);
  std::mt19937_64 rng(seed);
  std::shuffle(instances.begin(), instances.end(), rng);

  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t start = 0; start < instances.size(); start += batch_size) {
    ranges.emplace_back(start, std::min(instances.size(), start + batch_size));
  }
  if (ranges.size() > 1 && ranges.back().second - ranges.back().first < 2) {
    ranges[ranges.size() - 2].second = ranges.back().second;
    ranges.pop_back();
  }
  std::vector<Batch> batches;
  batches.reserve(ranges.size());
  for (auto [lo, hi] : ranges) {
    std::vector<TrainingInstance> chunk(instances.begin() + static_cast<std::ptrdiff_t>(lo),
                                        instances.begin() + static_cast<std::ptrdiff_t>(hi));
    batches.push_back(make_batch(dataset, chunk, max_seq_len));
  }
  return batches;
}

}  // namespace gsau
