#ifndef ADVTRANSFER_RUNNER_HPP_
#define ADVTRANSFER_RUNNER_HPP_

// Experiment configuration and the append-only run store behind the CLI.
//
// Run layout:
//   <output>/<timestamp>-<confighash>/
//     manifest.json  config.json  stages/
//     data/       index files and subset caches
//     checkpoints/<model>.pt, <model>.metrics.json
//     aes/<source>__<attack>.npy, .csv
//     reports/

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "advtransfer/attacks.hpp"
#include "advtransfer/dataset.hpp"
#include "advtransfer/models.hpp"
#include "advtransfer/transfer.hpp"

namespace advtransfer {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kCorpusRootEnv = "ADVTRANSFER_CIFAR10_ROOT";

struct DatasetSection {
  std::string root = "data";
  std::int64_t train_subset = 5000;  // stratified; 50000 = full split
  std::int64_t test_subset = 1000;   // stratified; 10000 = full split
  std::int64_t side = kCorpusSide;
  std::uint64_t seed = 0;
};

struct ModelEntry {
  ModelSpec spec;
  TrainConfig train;
};

struct AttackSection {
  AttackBudget budget;
  std::vector<AttackKind> attacks{kAllAttacks.begin(), kAllAttacks.end()};
};

struct TransferSection {
  std::string name;
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  Framework framework = Framework::kPlain;
  PerturbationDomain domain = PerturbationDomain::kEndToEnd;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSection dataset;
  std::vector<ModelEntry> models;
  AttackSection attack;
  std::vector<TransferSection> transfers;
  std::string output = "runs";

  // Throws ConfigError listing the known ids.
  const ModelEntry& model(const std::string& id) const;
  void validate() const;
  nlohmann::json to_json() const;
  std::string hash() const;
};

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
// Replaces every seed in the config (data, init, training, attack).
void apply_seed(ExperimentConfig& config, std::uint64_t seed);
// Corpus root with the environment override applied.
std::filesystem::path corpus_root(const ExperimentConfig& config);

// Append-only directory: files may be created, never changed. Rewriting a
// file with identical bytes is allowed.
class RunStore {
 public:
  // Latest run for this config under config.output, or a fresh one.
  static RunStore open(const ExperimentConfig& config, bool create_new = false);
  // Explicit directory; created when missing.
  static RunStore at(const std::filesystem::path& dir, const ExperimentConfig& config);
  // Existing run for reading only.
  static RunStore existing(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  const std::string& config_hash() const { return hash_; }
  nlohmann::json manifest() const;

  std::filesystem::path path(const std::string& relative) const { return dir_ / relative; }
  void write_text(const std::string& relative, const std::string& content) const;
  void write_json(const std::string& relative, const nlohmann::json& j) const;
  nlohmann::json read_json(const std::string& relative) const;
  bool exists(const std::string& relative) const;
  void record_stage(const std::string& stage, const nlohmann::json& detail) const;

  std::filesystem::path checkpoint(const std::string& model_id) const;

 private:
  RunStore(std::filesystem::path dir, std::string hash) : dir_(std::move(dir)), hash_(std::move(hash)) {}
  void initialise(const ExperimentConfig& config) const;

  std::filesystem::path dir_;
  std::string hash_;
};

struct PreparedData {
  ImageBatch train;
  ImageBatch test;
};

using LogFn = std::function<void(const std::string&)>;

PreparedData cmd_prepare(const ExperimentConfig& config, const RunStore& store,
                         const LogFn& log = {});
// Reads the prepared caches back.
PreparedData load_prepared(const RunStore& store);

TrainResult cmd_train(const ExperimentConfig& config, const RunStore& store,
                      const std::string& model_id, const LogFn& log = {});
Classifier load_trained(const RunStore& store, const std::string& model_id);

// White-box suite on the prepared test subset; AEs land in aes/.
std::map<AttackKind, SuiteEntry> cmd_attack(const ExperimentConfig& config, const RunStore& store,
                                            const std::string& model_id, const LogFn& log = {});

std::vector<TransferReport> cmd_transfer(const ExperimentConfig& config, const RunStore& store,
                                         const LogFn& log = {});

// Renders every report in the run; writes reports/report.txt.
std::string cmd_report(const std::filesystem::path& run_dir);

std::string environment_descriptor();

}  // namespace advtransfer

#endif  // ADVTRANSFER_RUNNER_HPP_
