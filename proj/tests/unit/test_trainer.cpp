#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "gsau/errors.hpp"
#include "gsau/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/toy.hpp"

using namespace gsau;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("gsau_trainer_" + name); }

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig small_model() {
  auto c = toy_model_config();
  c.init_std = 0.02;
  c.seq.dropout = 0.2;
  return c;
}

TrainerConfig small_trainer(std::size_t epochs) {
  TrainerConfig t;
  t.batch_size = 16;
  t.max_seq_len = 5;
  t.max_epochs = epochs;
  t.patience = 100;
  t.seed = 3;
  return t;
}

std::vector<float> flat(const GsauModel<float>& m) {
  std::vector<float> out;
  for (const auto& [name, p] : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

}  // namespace

TEST_CASE("Adam first step with unit gradients moves every entry by about -lr") {
  auto p = Tensor<double>::zeros({3, 2}, true);
  Adam<double> opt({{"p", p}}, {});
  for (auto& g : p.grad_mut()) g = 1.0;
  opt.step();
  for (double v : p.data()) CHECK(v == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(opt.steps() == 1);
}

TEST_CASE("Adam matches a hand-computed trajectory") {
  AdamConfig cfg{0.1, 0.8, 0.9, 1e-6};
  auto p = Tensor<double>::from_data({2}, {1.0, -2.0}, true);
  Adam<double> opt({{"p", p}}, cfg);
  const double grads[3][2] = {{0.5, -1.0}, {0.2, 0.0}, {-0.4, 3.0}};
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 3; ++t) {
    opt.zero_grad();
    auto g = p.grad_mut();
    for (int i = 0; i < 2; ++i) {
      g[static_cast<std::size_t>(i)] = grads[t - 1][i];
      m[i] = 0.8 * m[i] + 0.2 * grads[t - 1][i];
      v[i] = 0.9 * v[i] + 0.1 * grads[t - 1][i] * grads[t - 1][i];
      const double mh = m[i] / (1 - std::pow(0.8, t)), vh = v[i] / (1 - std::pow(0.9, t));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-6);
    }
    opt.step();
    for (int i = 0; i < 2; ++i) CHECK(p.data()[static_cast<std::size_t>(i)] == doctest::Approx(x[i]).epsilon(1e-14));
  }
}

TEST_CASE("early stopping: patience exhausted ten epochs after the best") {
  TrainState s;
  std::size_t epochs = 0;
  while (!s.should_stop(300, 10)) {
    ++epochs;
    const double ndcg = epochs <= 27 ? 0.01 * static_cast<double>(epochs) : 0.27 - 0.001 * static_cast<double>(epochs - 27);
    s.record_epoch(ndcg);
  }
  CHECK(s.epoch == 37);
  CHECK(s.best_epoch == 27);
  CHECK(s.best_ndcg == doctest::Approx(0.27));

  TrainState climbing;
  while (!climbing.should_stop(300, 10)) climbing.record_epoch(static_cast<double>(climbing.epoch));
  CHECK(climbing.epoch == 300);

  TrainState flat_run;
  CHECK(flat_run.record_epoch(0.0));
  CHECK_FALSE(flat_run.record_epoch(0.0));  // ties do not count as improvement
  CHECK(flat_run.epochs_since_best == 1);
}

TEST_CASE("epoch seeds separate epochs and streams") {
  CHECK(epoch_seed(1, 1, 0) == epoch_seed(1, 1, 0));
  CHECK(epoch_seed(1, 1, 0) != epoch_seed(1, 2, 0));
  CHECK(epoch_seed(1, 1, 0) != epoch_seed(1, 1, 1));
  CHECK(epoch_seed(1, 1, 0) != epoch_seed(2, 1, 0));
}

TEST_CASE("train_step: loss trends down on a synthetic set and every parameter moves") {
  auto ds = dataset_from_sequences(planted_two_block(20, 20, 10));
  auto adj = build_normalized_adjacency(ds.train_pairs(), ds.num_users(), ds.num_items());
  auto cfg = small_model();
  cfg.seq.max_seq_len = 8;
  GsauModel<double> model(ds.num_users(), ds.num_items(), cfg, 1);
  const auto init = model.clone();
  AdamConfig adam;
  adam.learning_rate = 1e-2;
  Adam<double> opt(model.parameters(), adam);
  LossConfig loss;
  auto batches = make_batches(ds, 64, 8, 1);
  std::mt19937_64 rng(9);
  std::vector<double> totals;
  for (int step = 0; step < 50; ++step) {
    totals.push_back(train_step(model, opt, batches[static_cast<std::size_t>(step) % batches.size()], adj, ds, loss, rng).total_value);
    if (step == 0) {
      auto now = model.parameters(), before = init.parameters();
      for (std::size_t k = 0; k < now.size(); ++k) {
        INFO(now[k].first);
        CHECK(!std::equal(now[k].second.data().begin(), now[k].second.data().end(), before[k].second.data().begin()));
      }
    }
  }
  auto window = [&](std::size_t lo) {
    double s = 0.0;
    for (std::size_t k = lo; k < lo + 10; ++k) s += totals[k];
    return s / 10.0;
  };
  CHECK(window(40) < window(20));
  CHECK(window(20) < window(0));
}

TEST_CASE("both objectives move the shared item rows") {
  auto toy = make_toy();
  for (bool drop_graph : {true, false}) {
    auto model = toy.model.clone();
    Adam<double> opt(model.parameters(), {});
    LossConfig loss;
    loss.without_graph = drop_graph;
    loss.without_sequential = !drop_graph;
    std::mt19937_64 rng(1);
    const std::vector<double> before(model.embeddings().data().begin(), model.embeddings().data().end());
    train_step(model, opt, toy.batch, toy.adj, toy.dataset, loss, rng);
    const std::size_t target_row = toy.dataset.num_users() + static_cast<std::size_t>(toy.batch.targets[0]);
    bool moved = false;
    for (std::size_t k = 0; k < 8; ++k) moved |= model.embeddings().data()[target_row * 8 + k] != before[target_row * 8 + k];
    INFO((drop_graph ? "sequential objective only" : "graph objective only"));
    CHECK(moved);
  }
}

TEST_CASE("train_step reports non-finite objectives") {
  auto toy = make_toy();
  Adam<double> opt(toy.model.parameters(), {});
  toy.model.embeddings().data_mut()[0] = std::nan("");
  std::mt19937_64 rng(1);
  CHECK_THROWS_WITH_AS(train_step(toy.model, opt, toy.batch, toy.adj, toy.dataset, LossConfig{}, rng),
                       doctest::Contains("train_step"), NumericError);
}

TEST_CASE("gradient clipping bounds the update direction") {
  auto toy = make_toy();
  auto a = toy.model.clone(), b = toy.model.clone();
  Adam<double> oa(a.parameters(), {}), ob(b.parameters(), {});
  std::mt19937_64 r1(1), r2(1);
  train_step(a, oa, toy.batch, toy.adj, toy.dataset, LossConfig{}, r1, 0.0);
  train_step(b, ob, toy.batch, toy.adj, toy.dataset, LossConfig{}, r2, 1e-6);
  // Adam normalizes the first step, so clipping a uniform scale away leaves it unchanged up to eps.
  for (std::size_t k = 0; k < 20; ++k)
    CHECK(a.embeddings().data()[k] == doctest::Approx(b.embeddings().data()[k]).epsilon(1e-3));
}

TEST_CASE("checkpoints round-trip bit-exactly and reject bad files") {
  auto ds = dataset_from_sequences(planted_two_block(6, 12, 7));
  GsauModel<float> model(ds.num_users(), ds.num_items(), small_model(), 4);
  Adam<float> opt(model.parameters(), {});
  for (auto [name, p] : model.parameters())
    for (auto& g : p.grad_mut()) g = 0.25f;
  opt.step();
  opt.step();
  TrainState state{7, 0.123456789012345, 5, 2};

  const auto path = temp_file("a.ckpt"), again = temp_file("b.ckpt");
  save_checkpoint(path, model, &opt, &state);

  GsauModel<float> fresh(ds.num_users(), ds.num_items(), small_model(), 99);
  Adam<float> fresh_opt(fresh.parameters(), {});
  TrainState fresh_state;
  load_checkpoint(path, fresh, &fresh_opt, &fresh_state);
  CHECK(flat(fresh) == flat(model));
  CHECK(fresh_opt.steps() == 2);
  CHECK(fresh_state.epoch == 7);
  CHECK(fresh_state.best_ndcg == state.best_ndcg);
  CHECK(fresh_state.best_epoch == 5);
  CHECK(fresh_state.epochs_since_best == 2);
  auto ms = opt.state(), fs_ = fresh_opt.state();
  for (std::size_t k = 0; k < ms.size(); ++k)
    CHECK(std::equal(ms[k].second.data().begin(), ms[k].second.data().end(), fs_[k].second.data().begin()));

  save_checkpoint(again, fresh, &fresh_opt, &fresh_state);
  CHECK(read_bytes(path) == read_bytes(again));

  SUBCASE("a fresh model's checkpoint holds its initial values") {
    GsauModel<float> init(ds.num_users(), ds.num_items(), small_model(), 4), other(ds.num_users(), ds.num_items(), small_model(), 5);
    save_checkpoint(again, init);
    load_checkpoint(again, other);
    CHECK(flat(other) == flat(init));
  }
  SUBCASE("wrong dimensions name the tensor") {
    auto cfg = small_model();
    cfg.embedding_dim = cfg.seq.hidden_dim = 4;
    GsauModel<float> narrow(ds.num_users(), ds.num_items(), cfg, 1);
    CHECK_THROWS_WITH_AS(load_checkpoint(path, narrow), doctest::Contains("embeddings"), ShapeError);
  }
  SUBCASE("truncated file") {
    auto bytes = read_bytes(path);
    std::ofstream(again, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_WITH_AS(load_checkpoint(again, fresh), doctest::Contains("truncated"), DataError);
  }
  SUBCASE("bad magic and version mismatch") {
    auto bytes = read_bytes(path);
    auto broken = bytes;
    broken[0] = 'X';
    std::ofstream(again, std::ios::binary) << broken;
    CHECK_THROWS_WITH_AS(load_checkpoint(again, fresh), doctest::Contains("magic"), DataError);
    broken = bytes;
    broken[4] = 9;
    std::ofstream(again, std::ios::binary) << broken;
    CHECK_THROWS_WITH_AS(load_checkpoint(again, fresh), doctest::Contains("version"), DataError);
  }
  SUBCASE("missing optimizer state") {
    save_checkpoint(again, model);
    CHECK_THROWS_WITH_AS(load_checkpoint(again, fresh, &fresh_opt), doctest::Contains("opt/"), DataError);
  }
  fs::remove(path);
  fs::remove(again);
}

TEST_CASE("fit is deterministic and resuming replays the same epochs") {
  auto ds = dataset_from_sequences(planted_two_block(12, 16, 8));
  auto adj = build_normalized_adjacency(ds.train_pairs(), ds.num_users(), ds.num_items());
  LossConfig loss;

  auto run = [&](std::size_t epochs) {
    GsauModel<float> model(ds.num_users(), ds.num_items(), small_model(), 8);
    Adam<float> opt(model.parameters(), {});
    auto result = fit(model, opt, ds, adj, loss, small_trainer(epochs));
    return std::make_pair(result.history, flat(model));
  };
  auto [h1, w1] = run(4);
  auto [h2, w2] = run(4);
  REQUIRE(h1.size() == 4);
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(h1[e].loss.total == h2[e].loss.total);
    CHECK(h1[e].validation.same_metrics(h2[e].validation));
  }
  CHECK(w1 == w2);

  const auto path = temp_file("resume.ckpt");
  {
    GsauModel<float> model(ds.num_users(), ds.num_items(), small_model(), 8);
    Adam<float> opt(model.parameters(), {});
    auto first = fit(model, opt, ds, adj, loss, small_trainer(2));
    save_checkpoint(path, model, &opt, &first.state);
  }
  GsauModel<float> model(ds.num_users(), ds.num_items(), small_model(), 8);
  Adam<float> opt(model.parameters(), {});
  TrainState state;
  load_checkpoint(path, model, &opt, &state);
  CHECK(state.epoch == 2);
  auto rest = fit(model, opt, ds, adj, loss, small_trainer(4), state);
  REQUIRE(rest.history.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(rest.history[e].epoch == e + 3);
    CHECK(rest.history[e].loss.total == h1[e + 2].loss.total);
    CHECK(rest.history[e].validation.same_metrics(h1[e + 2].validation));
  }
  CHECK(flat(model) == w1);
  fs::remove(path);
}

TEST_CASE("fit keeps the best-on-validation model") {
  auto ds = dataset_from_sequences(planted_two_block(12, 16, 8));
  auto adj = build_normalized_adjacency(ds.train_pairs(), ds.num_users(), ds.num_items());
  GsauModel<float> model(ds.num_users(), ds.num_items(), small_model(), 2);
  Adam<float> opt(model.parameters(), {});
  auto cfg = small_trainer(6);
  auto result = fit(model, opt, ds, adj, LossConfig{}, cfg);
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const auto& r : result.history) {
    if (r.validation.ndcg.at(20) > best) {
      best = r.validation.ndcg.at(20);
      best_epoch = r.epoch;
    }
  }
  CHECK(result.state.best_epoch == best_epoch);
  auto again = evaluate_model(result.best_model, ds, adj, LossConfig{}, cfg, Split::Validation);
  CHECK(again.ndcg.at(20) == best);
}
