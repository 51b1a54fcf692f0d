#include <doctest.h>

#include <random>

#include "gsau/errors.hpp"
#include "gsau/seq_encoder.hpp"
#include "support/gradcheck.hpp"
#include "support/tensors.hpp"

using namespace gsau;
using namespace testing_support;
using TD = Tensor<double>;

namespace {

SeqEncoderConfig small_config(std::size_t layers = 2) {
  SeqEncoderConfig c;
  c.num_layers = layers;
  c.num_heads = 2;
  c.hidden_dim = 8;
  c.ffn_dim = 16;
  c.max_seq_len = 6;
  c.dropout = 0.0;
  return c;
}

SeqEncoder<double> make_encoder(const SeqEncoderConfig& c, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  auto enc = SeqEncoder<double>(c, rng);
  // Larger weights than the default init make every path visibly nonlinear.
  for (auto& [name, p] : enc.parameters()) {
    if (name.find("gain") != std::string::npos) continue;
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& v : p.data_mut()) v = normal(rng);
  }
  return enc;
}

std::vector<double> row(const TD& t, std::size_t r) {
  return {t.data().begin() + static_cast<std::ptrdiff_t>(r * t.dim(1)),
          t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * t.dim(1))};
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_activation("relu") == Activation::Relu);
  CHECK_THROWS_AS(parse_activation("tanh"), ConfigError);
}

TEST_CASE("identity blocks with a zero positional table return the item embedding") {
  auto c = small_config();
  c.identity_blocks = true;
  auto enc = make_encoder(c);
  for (auto& v : enc.positional().data_mut()) v = 0.0;
  auto table = random_tensor({5, 8}, 3, false);
  auto batch = make_history_batch({0}, {{3}}, 6);
  auto out = enc.encode(batch, table, 0, false, nullptr);
  CHECK(row(out, 0) == row(table, 3));
}

TEST_CASE("output shape is batch by hidden width") {
  auto enc = make_encoder(small_config());
  auto table = random_tensor({9, 8}, 1, false);
  auto batch = make_history_batch({0, 1, 2}, {{1, 2, 3}, {4}, {5, 6, 7, 8, 0}}, 6);
  CHECK(enc.encode(batch, table, 0, false, nullptr).shape() == Shape{3, 8});
  CHECK(enc.encode_positions(batch, table, 0, false, nullptr).shape() == Shape{3, batch.width, 8});
}

TEST_CASE("causal mask: later items never influence earlier positions") {
  auto enc = make_encoder(small_config());
  auto table = random_tensor({9, 8}, 2, false);
  auto a = make_history_batch({0}, {{1, 2, 3, 4, 5}}, 6);
  auto states_a = enc.encode_positions(a, table, 0, false, nullptr);
  for (std::size_t t = 0; t + 1 < 5; ++t) {
    auto b = a;
    b.prefix[t + 1] = 8;  // perturb a strictly later position
    auto states_b = enc.encode_positions(b, table, 0, false, nullptr);
    for (std::size_t s = 0; s <= t; ++s)
      for (std::size_t k = 0; k < 8; ++k)
        CHECK(states_a.data()[s * 8 + k] == states_b.data()[s * 8 + k]);
    bool later_changed = false;
    for (std::size_t k = (t + 1) * 8; k < 5 * 8; ++k)
      later_changed |= std::abs(states_a.data()[k] - states_b.data()[k]) > 1e-6;
    CHECK(later_changed);
  }
}

TEST_CASE("padding invariance: extra left padding leaves the representation unchanged") {
  auto enc = make_encoder(small_config());
  auto table = random_tensor({9, 8}, 4, false);
  auto alone = enc.encode(make_history_batch({0}, {{2, 7}}, 6), table, 0, false, nullptr);
  for (std::size_t longer = 3; longer <= 6; ++longer) {
    std::vector<std::int32_t> other;
    for (std::size_t k = 0; k < longer; ++k) other.push_back(static_cast<std::int32_t>(k));
    auto batch = make_history_batch({1, 0}, {other, {2, 7}}, 6);
    REQUIRE(batch.width == longer);
    auto padded = enc.encode(batch, table, 0, false, nullptr);
    auto got = row(padded, 1), want = row(alone, 0);
    for (std::size_t k = 0; k < 8; ++k) CHECK(got[k] == doctest::Approx(want[k]).epsilon(1e-13));
  }
}

TEST_CASE("padded slots do not reach valid outputs") {
  auto enc = make_encoder(small_config());
  auto table = random_tensor({9, 8}, 5, false);
  auto batch = make_history_batch({0, 1}, {{1, 2, 3, 4}, {5}}, 6);
  auto base = enc.encode(batch, table, 0, false, nullptr);
  auto changed_table = table.detach();
  // padding reads no table row; perturbing every item not in row 1 leaves row 1 alone
  for (std::size_t item : {1, 2, 3, 4})
    for (std::size_t k = 0; k < 8; ++k) changed_table.data_mut()[item * 8 + k] += 1.0;
  auto again = enc.encode(batch, changed_table, 0, false, nullptr);
  CHECK(row(again, 1) == row(base, 1));
}

TEST_CASE("encoder rejects over-long prefixes and mismatched tables") {
  auto enc = make_encoder(small_config());
  auto table = random_tensor({9, 8}, 6, false);
  auto wide = make_history_batch({0}, {{1, 2, 3, 4, 5, 6, 7}}, 7);
  CHECK_THROWS_AS(enc.encode(wide, table, 0, false, nullptr), ShapeError);
  CHECK_THROWS_AS(enc.encode(make_history_batch({0}, {{1}}, 6), random_tensor({9, 4}, 1, false), 0, false, nullptr),
                  ShapeError);
  auto c = small_config();
  c.dropout = 0.2;
  auto dropping = make_encoder(c);
  CHECK_THROWS_AS(dropping.encode(make_history_batch({0}, {{1}}, 6), table, 0, true, nullptr), ConfigError);
}

TEST_CASE("dropout is active only in training mode") {
  auto c = small_config();
  c.dropout = 0.5;
  auto enc = make_encoder(c);
  auto table = random_tensor({9, 8}, 7, false);
  auto batch = make_history_batch({0}, {{1, 2, 3}}, 6);
  std::mt19937_64 r1(1), r2(1), r3(2);
  auto eval_a = enc.encode(batch, table, 0, false, nullptr);
  auto eval_b = enc.encode(batch, table, 0, false, nullptr);
  CHECK(row(eval_a, 0) == row(eval_b, 0));
  auto t1 = enc.encode(batch, table, 0, true, &r1);
  auto t2 = enc.encode(batch, table, 0, true, &r2);
  auto t3 = enc.encode(batch, table, 0, true, &r3);
  CHECK(row(t1, 0) == row(t2, 0));
  CHECK(row(t1, 0) != row(t3, 0));
  CHECK(row(t1, 0) != row(eval_a, 0));
}

TEST_CASE("encoder gradients match central differences") {
  for (auto act : {Activation::Gelu, Activation::Relu}) {
    auto c = small_config(1);
    c.activation = act;
    auto enc = make_encoder(c, 9);
    auto table = random_tensor({6, 8}, 10);
    auto w = random_tensor({3, 8}, 11, false);
    auto batch = make_history_batch({0, 1, 2}, {{1, 2, 3}, {4}, {5, 0, 2, 1}}, 6);
    NamedTensors<double> params{{"table", table}};
    for (auto& p : enc.parameters()) params.push_back(p);
    auto r = gradient_check(params, [&] { return sum(mul(enc.encode(batch, table, 0, false, nullptr), w)); });
    INFO(to_string(act) << " worst " << r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("every encoder parameter receives a nonzero gradient on a generic batch") {
  auto enc = make_encoder(small_config());
  auto table = random_tensor({9, 8}, 12);
  auto w = random_tensor({2, 8}, 13, false);
  auto batch = make_history_batch({0, 1}, {{1, 2, 3}, {4, 5}}, 6);
  Tape<double>::active().clear();
  backward(sum(mul(enc.encode(batch, table, 0, false, nullptr), w)));
  Tape<double>::active().clear();
  for (auto [name, p] : enc.parameters()) {
    bool nonzero = false;
    if (p.has_grad())
      for (double g : p.grad()) nonzero |= g != 0.0;
    INFO(name);
    CHECK(nonzero);
    p.zero_grad();
  }
}

TEST_CASE("score_all_items takes dot products with every item") {
  auto items = TD::from_data({3, 2}, {1.0, 2.0, -1.0, 0.5, 0.0, 3.0});
  auto reps = TD::from_data({2, 2}, {2.0, -1.0, 0.0, 0.0});
  auto logits = score_all_items(reps, items);
  CHECK(logits.at(0, 0) == 0.0);
  CHECK(logits.at(0, 1) == -2.5);
  CHECK(logits.at(0, 2) == -3.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(logits.at(1, i) == 0.0);

  auto basis = TD::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto pick = score_all_items(TD::from_data({1, 3}, {0, 1, 0}), basis);
  CHECK(pick.at(0, 1) > pick.at(0, 0));
  CHECK(pick.at(0, 1) > pick.at(0, 2));
}
