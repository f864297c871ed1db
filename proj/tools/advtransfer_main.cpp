// advtransfer: prepare | train | attack | transfer | report

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "advtransfer/errors.hpp"
#include "advtransfer/runner.hpp"

namespace {

using namespace advtransfer;

struct Options {
  std::string config;
  std::string model;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool new_run = false;
};

ExperimentConfig load(const Options& o) {
  auto config = load_config(o.config);
  if (o.seed) apply_seed(config, *o.seed);
  return config;
}

RunStore store_for(const ExperimentConfig& config, const Options& o, bool create_new = false) {
  if (!o.out.empty()) return RunStore::at(o.out, config);
  return RunStore::open(config, create_new);
}

void log_line(const std::string& line) { std::cerr << line << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial transferability experiments on block-encrypted image classifiers"};
  app.require_subcommand(1);
  Options o;

  const auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* c = cmd->add_option("--config", o.config, "experiment config (JSON)");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "override every seed in the config");
    cmd->add_option("--out", o.out, "run directory (default: latest run of this config)");
  };

  auto* prepare = app.add_subcommand("prepare", "write subset index files and data caches");
  add_common(prepare, true);
  prepare->add_flag("--new-run", o.new_run, "always start a fresh run directory");

  auto* train = app.add_subcommand("train", "train one model (or all) from the config");
  add_common(train, true);
  train->add_option("--model", o.model, "model id (default: every model)");

  auto* attack = app.add_subcommand("attack", "white-box attack suite against a trained model");
  add_common(attack, true);
  attack->add_option("--model", o.model, "model id (default: every model)");

  auto* transfer = app.add_subcommand("transfer", "run every transfer matrix in the config");
  add_common(transfer, true);

  auto* report = app.add_subcommand("report", "render the tables of a run directory");
  report->add_option("--out", o.out, "run directory")->required();
  report->add_option("--config", o.config, "unused; accepted for symmetry");

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::cout << cmd_report(o.out);
      return 0;
    }
    const auto config = load(o);
    if (prepare->parsed()) {
      const auto store = store_for(config, o, o.new_run);
      cmd_prepare(config, store, log_line);
      std::cout << store.dir().string() << '\n';
    } else if (train->parsed()) {
      const auto store = store_for(config, o);
      if (!o.model.empty()) {
        cmd_train(config, store, o.model, log_line);
      } else {
        for (const auto& m : config.models) cmd_train(config, store, m.spec.id, log_line);
      }
      std::cout << store.dir().string() << '\n';
    } else if (attack->parsed()) {
      const auto store = store_for(config, o);
      if (!o.model.empty()) {
        cmd_attack(config, store, o.model, log_line);
      } else {
        for (const auto& m : config.models) cmd_attack(config, store, m.spec.id, log_line);
      }
      std::cout << store.dir().string() << '\n';
    } else if (transfer->parsed()) {
      const auto store = store_for(config, o);
      cmd_transfer(config, store, log_line);
      std::cout << cmd_report(store.dir());
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
