#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gsau/dataset.hpp"

namespace testing_support {

/// Interactions from explicit per-user item sequences; timestamps follow list order.
inline std::vector<gsau::Interaction> interactions_from_sequences(
    const std::vector<std::vector<int>>& sequences) {
  std::vector<gsau::Interaction> out;
  std::size_t position = 0;
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    for (std::size_t t = 0; t < sequences[u].size(); ++t) {
      out.push_back({"u" + std::to_string(u), "i" + std::to_string(sequences[u][t]),
                     static_cast<std::int64_t>(1000 + t), position++});
    }
  }
  return out;
}

inline gsau::Dataset dataset_from_sequences(const std::vector<std::vector<int>>& sequences) {
  return gsau::Dataset::from_interactions(interactions_from_sequences(sequences));
}

/// Random log as TSV text: users draw items from a skewed popularity curve.
inline std::string random_log(std::size_t users, std::size_t items, std::size_t per_user,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> weights(items);
  for (std::size_t i = 0; i < items; ++i) weights[i] = 1.0 / static_cast<double>(i + 1);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::uniform_int_distribution<int> extra(0, static_cast<int>(per_user));
  std::ostringstream os;
  for (std::size_t u = 0; u < users; ++u) {
    const std::size_t n = per_user + static_cast<std::size_t>(extra(rng));
    for (std::size_t k = 0; k < n; ++k) {
      os << "user" << u << '\t' << "item" << pick(rng) << '\t' << (rng() % 100000) << '\n';
    }
  }
  return os.str();
}

/// Two disjoint communities: users 0..19 cycle through items 0..19 and
/// users 20..39 through items 20..39, each from its own starting offset.
/// The next item is always the successor in the user's block.
inline std::vector<std::vector<int>> planted_two_block(std::size_t users = 40, std::size_t items = 40,
                                                       std::size_t length = 12) {
  const std::size_t half_users = users / 2, half_items = items / 2;
  std::vector<std::vector<int>> sequences(users);
  for (std::size_t u = 0; u < users; ++u) {
    const std::size_t block = u < half_users ? 0 : 1;
    const std::size_t start = (u * 7) % half_items;
    for (std::size_t t = 0; t < length; ++t) {
      sequences[u].push_back(static_cast<int>(block * half_items + (start + t) % half_items));
    }
  }
  return sequences;
}

}  // namespace testing_support
