// gsau: preprocess logs, train, evaluate and sweep the uniformity weight.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gsau/config.hpp"
#include "gsau/errors.hpp"
#include "gsau/evaluator.hpp"
#include "gsau/runtime.hpp"
#include "gsau/trainer.hpp"

namespace fs = std::filesystem;
using namespace gsau;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

const std::vector<double> kDefaultGammaGrid{0.05, 0.1, 0.2, 0.3, 0.4, 0.5};

std::string flag_name(const std::string& key) {
  std::string out = key;
  std::replace(out.begin(), out.end(), '_', '-');
  return "--" + out;
}

/// Config keys exposed as flags on a subcommand, applied after --config.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::vector<std::string> ablations;
  std::string delimiter;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "flat key = value config file")->check(CLI::ExistingFile);
    for (const auto& key : RunConfig::keys()) {
      options[key] = app.add_option(flag_name(key), values[key], RunConfig::describe(key));
    }
    app.add_option("--ablation", ablations,
                   "without-graph, without-sequential, without-rec or without-ui-uniform (repeatable)");
    app.add_option("--delimiter", delimiter, "field delimiter: tab or comma (same as --format)");
  }

  RunConfig resolve() const {
    RunConfig config;
    if (!config_file.empty()) apply_config_file(config, config_file);
    apply(config);
    config.validate();
    return config;
  }

  void apply(RunConfig& config) const {
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) config.set(key, values.at(key));
    }
    if (!delimiter.empty()) {
      if (delimiter == "tab" || delimiter == "\\t" || delimiter == "\t") {
        config.set("format", "tsv");
      } else if (delimiter == "comma" || delimiter == ",") {
        config.set("format", "csv");
      } else {
        throw ConfigError("unsupported delimiter '" + delimiter + "' (expected tab or comma)");
      }
    }
    for (const auto& a : ablations) {
      if (a == "without-graph") {
        config.loss.without_graph = true;
      } else if (a == "without-sequential") {
        config.loss.without_sequential = true;
      } else if (a == "without-rec") {
        config.loss.variant = Variant::Gsau;
      } else if (a == "without-ui-uniform") {
        config.loss.without_ui_uniform = true;
      } else {
        throw ConfigError("unknown ablation '" + a + "'");
      }
    }
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunConfig load_run_config(const fs::path& run_dir) {
  RunConfig config;
  apply_config_file(config, run_dir / "config.txt");
  config.validate();
  return config;
}

std::string epoch_line(const EpochRecord& r, const RunConfig& config, const std::string& fingerprint) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["loss"] = {{"total", r.loss.total},
               {"graph_alignment", r.loss.graph_alignment},
               {"sequential", r.loss.sequential},
               {"graph_uniformity", r.loss.graph_uniformity},
               {"sequential_uniformity", r.loss.sequential_uniformity}};
  for (auto k : r.validation.ks) {
    j["validation"]["recall@" + std::to_string(k)] = r.validation.recall.at(k);
    j["validation"]["ndcg@" + std::to_string(k)] = r.validation.ndcg.at(k);
  }
  j["improved"] = r.improved;
  j["config_hash"] = config.hash();
  j["seed"] = config.trainer.seed;
  j["dataset"] = fingerprint;
  return j.dump();
}

void tag(MetricsReport& report, const RunConfig& config, const Dataset& dataset) {
  report.metadata["config_hash"] = config.hash();
  report.metadata["seed"] = std::to_string(config.trainer.seed);
  report.metadata["dataset"] = dataset.fingerprint();
}

struct TrainOutcome {
  MetricsReport validation;
  MetricsReport test;
  TrainState state;
};

/// Trains into `config.output_dir`, resuming from last.ckpt when asked.
TrainOutcome run_training(const RunConfig& config, bool resume, bool quiet) {
  const fs::path dir = config.output_dir;
  fs::create_directories(dir);

  IngestReport ingest_report;
  const Dataset dataset = load_dataset(config.data, &ingest_report);
  const std::string fingerprint = dataset.fingerprint();
  if (!quiet) {
    std::cerr << "dataset: " << dataset.num_users() << " users, " << dataset.num_items() << " items, "
              << dataset.num_interactions() << " interactions (" << fingerprint << ")\n";
    if (ingest_report.malformed > 0) std::cerr << "skipped " << ingest_report.malformed << " malformed lines\n";
  }

  if (resume) {
    const auto recorded = read_text(dir / "fingerprint.txt");
    if (recorded != fingerprint + "\n") {
      throw DataError("dataset fingerprint " + fingerprint + " differs from the run's " + recorded);
    }
  } else {
    write_text(dir / "config.txt", config.to_text());
    write_text(dir / "seed.txt", std::to_string(config.trainer.seed) + "\n");
    write_text(dir / "fingerprint.txt", fingerprint + "\n");
    write_text(dir / "epochs.jsonl", "");
  }

  const auto adj = build_normalized_adjacency(dataset.train_pairs(), dataset.num_users(), dataset.num_items());
  GsauModel<float> model(dataset.num_users(), dataset.num_items(), config.model, config.trainer.seed);
  Adam<float> optimizer(model.parameters(), config.trainer.adam);
  TrainState state;
  if (resume) {
    load_checkpoint(dir / "last.ckpt", model, &optimizer, &state);
    if (!quiet) std::cerr << "resuming after epoch " << state.epoch << '\n';
  }

  std::ofstream epochs(dir / "epochs.jsonl", std::ios::app);
  const auto start = std::chrono::steady_clock::now();
  fit(model, optimizer, dataset, adj, config.loss, config.trainer, state,
      [&](const EpochRecord& r, const TrainState& s) {
        epochs << epoch_line(r, config, fingerprint) << '\n' << std::flush;
        if (r.improved) save_checkpoint(dir / "best.ckpt", model);
        save_checkpoint(dir / "last.ckpt", model, &optimizer, &s);
        if (!quiet) {
          const double secs =
              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          std::cerr << "epoch " << r.epoch << "  loss " << r.loss.total << "  val ndcg@"
                    << config.trainer.early_stop_k << " " << r.validation.ndcg.at(config.trainer.early_stop_k)
                    << (r.improved ? " *" : "") << "  (" << secs << " s)\n";
        }
      });

  TrainOutcome outcome;
  load_checkpoint(dir / "last.ckpt", model, &optimizer, &outcome.state);
  load_checkpoint(dir / "best.ckpt", model);
  outcome.validation = evaluate_model(model, dataset, adj, config.loss, config.trainer, Split::Validation);
  outcome.test = evaluate_model(model, dataset, adj, config.loss, config.trainer, Split::Test);
  outcome.validation.epoch = outcome.test.epoch = static_cast<long>(outcome.state.best_epoch);
  tag(outcome.validation, config, dataset);
  tag(outcome.test, config, dataset);

  write_text(dir / "report.jsonl", outcome.validation.to_json_line() + "\n" + outcome.test.to_json_line() + "\n");
  write_text(dir / "report.txt", format_table({{"validation", outcome.validation}, {"test", outcome.test}}));
  return outcome;
}

int cmd_preprocess(const ConfigFlags& flags, const std::string& out_path) {
  RunConfig config = flags.resolve();
  IngestReport report;
  const Dataset dataset = load_dataset(config.data, &report);
  dataset.save_snapshot(out_path);
  std::cout << "lines " << report.lines << ", malformed " << report.malformed << ", duplicates "
            << report.duplicates << '\n'
            << "users " << dataset.num_users() << ", items " << dataset.num_items() << ", interactions "
            << dataset.num_interactions() << '\n'
            << "fingerprint " << dataset.fingerprint() << '\n';
  return kExitOk;
}

int cmd_train(const ConfigFlags& flags, const std::string& resume_dir, bool quiet) {
  RunConfig config;
  const bool resume = !resume_dir.empty();
  if (resume) {
    config = load_run_config(resume_dir);
    config.output_dir = resume_dir;
  } else {
    config = flags.resolve();
  }
  auto outcome = run_training(config, resume, quiet);
  std::cout << format_table({{"validation", outcome.validation}, {"test", outcome.test}});
  std::cout << outcome.test.to_json_line() << '\n';
  return kExitOk;
}

int cmd_evaluate(const std::string& run_dir, const std::string& split_name, const std::string& head) {
  RunConfig config = load_run_config(run_dir);
  if (!head.empty()) config.set("scoring_head", head);
  const Split split = parse_split(split_name);
  const Dataset dataset = load_dataset(config.data);
  const auto recorded = read_text(fs::path(run_dir) / "fingerprint.txt");
  if (recorded != dataset.fingerprint() + "\n") throw DataError("dataset differs from the one the run used");
  const auto adj = build_normalized_adjacency(dataset.train_pairs(), dataset.num_users(), dataset.num_items());
  GsauModel<float> model(dataset.num_users(), dataset.num_items(), config.model, config.trainer.seed);
  load_checkpoint(fs::path(run_dir) / "best.ckpt", model);
  auto report = evaluate_model(model, dataset, adj, config.loss, config.trainer, split);
  tag(report, config, dataset);
  std::cout << format_table({{to_string(split), report}}) << report.to_json_line() << '\n';
  return kExitOk;
}

int cmd_sweep(const ConfigFlags& flags, std::vector<double> grid, bool quiet) {
  RunConfig base = flags.resolve();
  if (grid.empty()) grid = kDefaultGammaGrid;
  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::ostringstream jsonl;
  for (double gamma : grid) {
    RunConfig config = base;
    config.loss.gamma = gamma;
    std::ostringstream label;
    label << "gamma=" << gamma;
    config.output_dir = (fs::path(base.output_dir) / label.str()).string();
    config.validate();
    if (!quiet) std::cerr << "== " << label.str() << '\n';
    auto outcome = run_training(config, false, quiet);
    outcome.test.metadata["gamma"] = label.str().substr(6);
    rows.emplace_back(label.str(), outcome.test);
    jsonl << outcome.test.to_json_line() << '\n';
  }
  fs::create_directories(base.output_dir);
  write_text(fs::path(base.output_dir) / "sweep.jsonl", jsonl.str());
  write_text(fs::path(base.output_dir) / "sweep.txt", format_table(rows));
  std::cout << format_table(rows);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Graph and sequence recommender with alignment and uniformity objectives"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress progress output");

  auto* preprocess = app.add_subcommand("preprocess", "filter and split a raw log into a dataset snapshot");
  ConfigFlags preprocess_flags;
  preprocess_flags.attach(*preprocess);
  std::string snapshot_out;
  preprocess->add_option("--out", snapshot_out, "snapshot path")->required();

  auto* train = app.add_subcommand("train", "train a model into a run directory");
  ConfigFlags train_flags;
  train_flags.attach(*train);
  std::string resume_dir;
  train->add_option("--resume", resume_dir, "continue an interrupted run directory")->check(CLI::ExistingDirectory);

  auto* evaluate = app.add_subcommand("evaluate", "score a trained run on a split");
  std::string eval_run, eval_split = "test", eval_head;
  evaluate->add_option("--run", eval_run, "run directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--split", eval_split, "validation or test");
  evaluate->add_option("--scoring-head", eval_head, "override the run's scoring head");

  auto* sweep = app.add_subcommand("sweep-gamma", "train once per uniformity weight");
  ConfigFlags sweep_flags;
  sweep_flags.attach(*sweep);
  std::vector<double> grid;
  sweep->add_option("--grid", grid, "gamma values (default 0.05 0.1 0.2 0.3 0.4 0.5)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*preprocess) return cmd_preprocess(preprocess_flags, snapshot_out);
    if (*train) return cmd_train(train_flags, resume_dir, quiet);
    if (*evaluate) return cmd_evaluate(eval_run, eval_split, eval_head);
    if (*sweep) return cmd_sweep(sweep_flags, grid, quiet);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
