#include "advtransfer/runner.hpp"

#include <torch/version.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "advtransfer/blockcipher.hpp"
#include "advtransfer/errors.hpp"

namespace advtransfer {

namespace fs = std::filesystem;

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& item : j.items()) {
    if (!known.contains(item.key())) {
      std::string list;
      for (const auto& k : known) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("unknown key '" + item.key() + "' in " + where + " (known: " + list + ")");
    }
  }
}

std::string utc_timestamp(bool compact) {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  if (compact) {
    std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%S", &tm);
    char out[48];
    std::snprintf(out, sizeof(out), "%s%03lld", buf, static_cast<long long>(ms));
    return out;
  }
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Moves `tmp` to `dest` unless dest already holds the same bytes.
void commit_file(const fs::path& tmp, const fs::path& dest) {
  if (fs::exists(dest)) {
    const bool same = read_file(tmp) == read_file(dest);
    fs::remove(tmp);
    if (!same) {
      throw StoreError("refusing to modify " + dest.string() +
                       ": run directories are append-only (start a new run)");
    }
    return;
  }
  fs::create_directories(dest.parent_path());
  fs::rename(tmp, dest);
}

std::string safe_name(std::string s) {
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return s;
}

void emit(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

}  // namespace

// ------------------------------------------------------------------- config

const ModelEntry& ExperimentConfig::model(const std::string& id) const {
  for (const auto& m : models) {
    if (m.spec.id == id) return m;
  }
  std::string known;
  for (const auto& m : models) known += (known.empty() ? "" : ", ") + m.spec.id;
  throw ConfigError("unknown model id '" + id + "' (known: " + known + ")");
}

void ExperimentConfig::validate() const {
  if (models.empty()) throw ConfigError("config lists no models");
  const auto& d = dataset;
  if (d.side < 1) throw ConfigError("dataset.side must be >= 1");
  if (d.train_subset < kNumClasses || d.train_subset > 50000 || d.train_subset % kNumClasses != 0) {
    throw ConfigError("dataset.train_subset must be a multiple of 10 in [10, 50000]");
  }
  if (d.test_subset < kNumClasses || d.test_subset > 10000 || d.test_subset % kNumClasses != 0) {
    throw ConfigError("dataset.test_subset must be a multiple of 10 in [10, 10000]");
  }
  std::set<std::string> ids;
  for (const auto& m : models) {
    if (m.spec.id.empty()) throw ConfigError("every model needs an id");
    if (!ids.insert(m.spec.id).second) throw ConfigError("duplicate model id '" + m.spec.id + "'");
    if (m.spec.input_side != d.side) {
      throw ConfigError("model '" + m.spec.id + "' expects side " + std::to_string(m.spec.input_side) +
                        " but dataset.side is " + std::to_string(d.side));
    }
    if (m.spec.cipher && d.side % m.spec.cipher->block_size != 0) {
      throw ConfigError("model '" + m.spec.id + "': block size " +
                        std::to_string(m.spec.cipher->block_size) + " does not divide side " +
                        std::to_string(d.side));
    }
  }
  attack.budget.validate();
  if (attack.attacks.empty()) throw ConfigError("attack.attacks is empty");
  std::set<std::string> names;
  for (const auto& t : transfers) {
    if (t.name.empty() || !names.insert(t.name).second) {
      throw ConfigError("transfer sections need unique, non-empty names");
    }
    if (t.sources.empty() || t.targets.empty()) {
      throw ConfigError("transfer '" + t.name + "' needs sources and targets");
    }
    for (const auto& id : t.sources) {
      const auto& m = model(id);
      if (t.framework == Framework::kEncryptedSource && !m.spec.cipher) {
        throw ConfigError("transfer '" + t.name + "': source '" + id +
                          "' has no cipher but the framework is encrypted_source");
      }
    }
    for (const auto& id : t.targets) (void)model(id);
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json models_j = nlohmann::json::array();
  for (const auto& m : models) {
    nlohmann::json e = m.spec;
    e["train"] = m.train;
    models_j.push_back(e);
  }
  std::vector<std::string> attack_names;
  for (const auto a : attack.attacks) attack_names.emplace_back(attack_name(a));
  nlohmann::json transfers_j = nlohmann::json::array();
  for (const auto& t : transfers) {
    transfers_j.push_back({{"name", t.name},
                           {"sources", t.sources},
                           {"targets", t.targets},
                           {"framework", framework_name(t.framework)},
                           {"domain", domain_name(t.domain)}});
  }
  return nlohmann::json{{"name", name},
                        {"dataset",
                         {{"root", dataset.root},
                          {"train_subset", dataset.train_subset},
                          {"test_subset", dataset.test_subset},
                          {"side", dataset.side},
                          {"seed", dataset.seed}}},
                        {"models", models_j},
                        {"attack", {{"budget", attack.budget}, {"attacks", attack_names}}},
                        {"transfers", transfers_j},
                        {"output", output}};
}

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("output");
  j["dataset"].erase("root");
  return config_hash(j);
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  reject_unknown(j, {"name", "dataset", "models", "attack", "transfers", "output"}, "config");
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  c.output = j.value("output", c.output);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    reject_unknown(d, {"root", "train_subset", "test_subset", "side", "seed"}, "dataset");
    c.dataset.root = d.value("root", c.dataset.root);
    c.dataset.train_subset = d.value("train_subset", c.dataset.train_subset);
    c.dataset.test_subset = d.value("test_subset", c.dataset.test_subset);
    c.dataset.side = d.value("side", c.dataset.side);
    c.dataset.seed = d.value("seed", c.dataset.seed);
  }
  for (const auto& m : j.value("models", nlohmann::json::array())) {
    reject_unknown(m, {"id", "family", "input_side", "config", "cipher", "weights_ref", "pretrained",
                       "pretrained_weights", "init_seed", "train"},
                   "model entry");
    auto spec_j = m;
    spec_j.erase("train");
    if (!spec_j.contains("input_side")) spec_j["input_side"] = c.dataset.side;
    ModelEntry e;
    e.spec = spec_j.get<ModelSpec>();
    if (m.contains("train")) e.train = m.at("train").get<TrainConfig>();
    c.models.push_back(std::move(e));
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    reject_unknown(a, {"budget", "attacks"}, "attack");
    if (a.contains("budget")) c.attack.budget = a.at("budget").get<AttackBudget>();
    if (a.contains("attacks")) {
      c.attack.attacks.clear();
      for (const auto& name : a.at("attacks")) c.attack.attacks.push_back(parse_attack(name.get<std::string>()));
    }
  }
  for (const auto& t : j.value("transfers", nlohmann::json::array())) {
    reject_unknown(t, {"name", "sources", "targets", "framework", "domain"}, "transfer entry");
    TransferSection s;
    s.name = t.value("name", std::string{});
    s.sources = t.value("sources", std::vector<std::string>{});
    s.targets = t.value("targets", std::vector<std::string>{});
    s.framework = parse_framework(t.value("framework", std::string("plain")));
    s.domain = parse_domain(t.value("domain", std::string("end_to_end")));
    c.transfers.push_back(std::move(s));
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    return parse_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

void apply_seed(ExperimentConfig& config, std::uint64_t seed) {
  config.dataset.seed = seed;
  for (auto& m : config.models) {
    m.spec.init_seed = seed;
    m.train.seed = seed;
  }
  config.attack.budget.seed = seed;
}

fs::path corpus_root(const ExperimentConfig& config) {
  if (const char* env = std::getenv(kCorpusRootEnv); env != nullptr && *env != '\0') return env;
  return config.dataset.root;
}

std::string environment_descriptor() {
  std::ostringstream os;
  os << "libtorch " << TORCH_VERSION << ", " << torch::get_num_threads() << " threads";
#if defined(__clang__)
  os << ", clang " << __clang_version__;
#elif defined(__GNUC__)
  os << ", gcc " << __VERSION__;
#endif
  return os.str();
}

// ---------------------------------------------------------------- run store

RunStore RunStore::open(const ExperimentConfig& config, bool create_new) {
  const auto hash = config.hash();
  const fs::path root = config.output;
  if (!create_new && fs::exists(root)) {
    std::vector<fs::path> matches;
    for (const auto& entry : fs::directory_iterator(root)) {
      const auto name = entry.path().filename().string();
      if (entry.is_directory() && name.size() > hash.size() &&
          name.compare(name.size() - hash.size(), hash.size(), hash) == 0) {
        matches.push_back(entry.path());
      }
    }
    if (!matches.empty()) {
      std::sort(matches.begin(), matches.end());
      return RunStore(matches.back(), hash);
    }
  }
  RunStore store(root / (utc_timestamp(true) + "-" + hash), hash);
  store.initialise(config);
  return store;
}

RunStore RunStore::at(const fs::path& dir, const ExperimentConfig& config) {
  RunStore store(dir, config.hash());
  if (fs::exists(dir / "manifest.json")) {
    const auto found = store.manifest().at("config_hash").get<std::string>();
    if (found != store.hash_) {
      throw StoreError("run " + dir.string() + " belongs to config " + found + ", not " + store.hash_);
    }
    return store;
  }
  store.initialise(config);
  return store;
}

RunStore RunStore::existing(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw StoreError("no such run directory: " + dir.string());
  if (fs::is_empty(dir)) throw StoreError("run directory is empty: " + dir.string());
  if (!fs::exists(dir / "manifest.json")) {
    throw StoreError("not a run directory (manifest.json missing): " + dir.string());
  }
  const auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
  return RunStore(dir, m.at("config_hash").get<std::string>());
}

void RunStore::initialise(const ExperimentConfig& config) const {
  fs::create_directories(dir_);
  for (const auto* sub : {"data", "checkpoints", "aes", "reports", "stages"}) {
    fs::create_directories(dir_ / sub);
  }
  std::map<std::string, std::uint64_t> seeds{{"dataset", config.dataset.seed},
                                             {"attack", config.attack.budget.seed}};
  for (const auto& m : config.models) {
    seeds["init/" + m.spec.id] = m.spec.init_seed;
    seeds["train/" + m.spec.id] = m.train.seed;
  }
  write_json("manifest.json",
             {{"config_hash", hash_},
              {"code_version", kVersion},
              {"created", utc_timestamp(false)},
              {"seeds", seeds},
              {"subset_indices", {{"train", "data/train_indices.txt"}, {"test", "data/test_indices.txt"}}},
              {"environment", environment_descriptor()}});
  write_json("config.json", config.to_json());
}

nlohmann::json RunStore::manifest() const { return read_json("manifest.json"); }

void RunStore::write_text(const std::string& relative, const std::string& content) const {
  const auto dest = dir_ / relative;
  fs::create_directories(dest.parent_path());
  const auto tmp = dest.parent_path() / ("." + dest.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw StoreError("cannot write " + tmp.string());
    out << content;
  }
  commit_file(tmp, dest);
}

void RunStore::write_json(const std::string& relative, const nlohmann::json& j) const {
  write_text(relative, j.dump(2) + "\n");
}

nlohmann::json RunStore::read_json(const std::string& relative) const {
  try {
    return nlohmann::json::parse(read_file(dir_ / relative));
  } catch (const nlohmann::json::parse_error& e) {
    throw StoreError((dir_ / relative).string() + " is not valid JSON: " + e.what());
  }
}

bool RunStore::exists(const std::string& relative) const { return fs::exists(dir_ / relative); }

void RunStore::record_stage(const std::string& stage, const nlohmann::json& detail) const {
  const auto stamp = utc_timestamp(true);
  write_json("stages/" + stamp + "-" + safe_name(stage) + ".json",
             {{"stage", stage}, {"config_hash", hash_}, {"finished", utc_timestamp(false)}, {"detail", detail}});
}

fs::path RunStore::checkpoint(const std::string& model_id) const {
  return dir_ / "checkpoints" / (safe_name(model_id) + ".pt");
}

// ----------------------------------------------------------------- commands

namespace {

void save_batch_cache(const RunStore& store, const std::string& name, const ImageBatch& batch) {
  const auto tmp = store.path("data/." + name + ".npy.tmp");
  save_npy(tmp, batch.pixels);
  commit_file(tmp, store.path("data/" + name + ".npy"));
  std::vector<std::int64_t> labels(batch.labels.data_ptr<std::int64_t>(),
                                   batch.labels.data_ptr<std::int64_t>() + batch.size());
  const auto comment = "config_hash=" + store.config_hash();
  const auto tmp_idx = store.path("data/." + name + "_indices.txt.tmp");
  write_index_file(tmp_idx, batch.source_indices, comment);
  commit_file(tmp_idx, store.path("data/" + name + "_indices.txt"));
  const auto tmp_lab = store.path("data/." + name + "_labels.txt.tmp");
  write_index_file(tmp_lab, labels, comment);
  commit_file(tmp_lab, store.path("data/" + name + "_labels.txt"));
}

ImageBatch load_batch_cache(const RunStore& store, const std::string& name) {
  if (!store.exists("data/" + name + ".npy")) {
    throw StoreError("run " + store.dir().string() + " has no prepared data; run `prepare` first");
  }
  ImageBatch b;
  b.pixels = load_npy(store.path("data/" + name + ".npy"));
  const auto labels = read_index_file(store.path("data/" + name + "_labels.txt"));
  b.labels = torch::tensor(labels, torch::kInt64);
  b.source_indices = read_index_file(store.path("data/" + name + "_indices.txt"));
  b.validate();
  return b;
}

std::string ae_stem(const std::string& model_id, AttackKind kind, PerturbationDomain domain) {
  auto stem = "aes/" + safe_name(model_id) + "__" + std::string(attack_name(kind));
  if (domain == PerturbationDomain::kEncryptedDomain) stem += "__encrypted_domain";
  return stem;
}

void save_examples(const RunStore& store, const std::string& model_id, AttackKind kind,
                   const AttackResult& result,
                   PerturbationDomain domain = PerturbationDomain::kEndToEnd) {
  const auto stem = ae_stem(model_id, kind, domain);
  const auto npy_tmp = store.path(stem + ".npy.tmp");
  const auto csv_tmp = store.path(stem + ".csv.tmp");
  fs::create_directories(npy_tmp.parent_path());
  save_attack_result(npy_tmp, csv_tmp, result,
                     "config_hash=" + store.config_hash() + " source=" + model_id +
                         " attack=" + std::string(attack_name(kind)));
  commit_file(npy_tmp, store.path(stem + ".npy"));
  commit_file(csv_tmp, store.path(stem + ".csv"));
}

}  // namespace

namespace {

ImageBatch load_split(const fs::path& root, Split split) {
  try {
    return load_corpus(root, split);
  } catch (const IngestionError& e) {
    throw IngestionError(std::string(e.what()) + "; point dataset.root or " + kCorpusRootEnv +
                         " at the CIFAR-10 binary directory (cifar-10-batches-bin)");
  }
}

// Resized float32 caches live in memory whole; refuse sizes the host cannot hold.
void check_footprint(std::int64_t images, std::int64_t side) {
  const double need = static_cast<double>(images) * 3.0 * static_cast<double>(side * side) * 4.0;
  const long pages = sysconf(_SC_PHYS_PAGES);
  const long page = sysconf(_SC_PAGE_SIZE);
  if (pages <= 0 || page <= 0) return;
  const double have = static_cast<double>(pages) * static_cast<double>(page);
  if (need > have) {
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "%lld images at side %lld need %.1f GB as float32 but this host has %.1f GB; "
                  "lower dataset.train_subset or dataset.side",
                  static_cast<long long>(images), static_cast<long long>(side), need / 1e9, have / 1e9);
    throw ConfigError(buf);
  }
}

}  // namespace

PreparedData cmd_prepare(const ExperimentConfig& config, const RunStore& store, const LogFn& log) {
  const auto root = corpus_root(config);
  emit(log, "loading corpus from " + root.string());
  PreparedData out;
  const auto& d = config.dataset;
  check_footprint(std::max(d.train_subset, d.test_subset), d.side);
  {
    const auto full = load_split(root, Split::kTrain);
    const auto idx = d.train_subset == full.size()
                         ? [&] {
                             std::vector<std::int64_t> all(static_cast<std::size_t>(full.size()));
                             for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
                             return all;
                           }()
                         : stratified_indices(full.labels, d.train_subset / kNumClasses, d.seed);
    out.train = resize_batch(subset(full, idx), d.side);
  }
  {
    const auto full = load_split(root, Split::kTest);
    const auto idx = d.test_subset == full.size()
                         ? [&] {
                             std::vector<std::int64_t> all(static_cast<std::size_t>(full.size()));
                             for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
                             return all;
                           }()
                         : stratified_indices(full.labels, d.test_subset / kNumClasses, d.seed + 1);
    out.test = resize_batch(subset(full, idx), d.side);
  }
  save_batch_cache(store, "train", out.train);
  save_batch_cache(store, "test", out.test);
  store.record_stage("prepare", {{"train", out.train.size()}, {"test", out.test.size()}, {"side", d.side}});
  emit(log, "prepared " + std::to_string(out.train.size()) + " train and " +
                std::to_string(out.test.size()) + " test images at side " + std::to_string(d.side));
  return out;
}

PreparedData load_prepared(const RunStore& store) {
  return {load_batch_cache(store, "train"), load_batch_cache(store, "test")};
}

TrainResult cmd_train(const ExperimentConfig& config, const RunStore& store,
                      const std::string& model_id, const LogFn& log) {
  const auto& entry = config.model(model_id);
  const auto data = load_prepared(store);
  const auto on_epoch = [&](const EpochMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s epoch %lld loss %.4f train %.4f heldout %.4f",
                  model_id.c_str(), static_cast<long long>(m.epoch), m.train_loss, m.train_accuracy,
                  m.heldout_accuracy);
    emit(log, buf);
  };
  auto result = train(entry.spec, data.train, &data.test, entry.train, on_epoch);
  const auto heldout = accuracy(result.classifier, data.test);
  const nlohmann::json extra = {{"config_hash", store.config_hash()},
                                {"train_config", entry.train},
                                {"heldout_accuracy", heldout}};
  const auto dest = store.checkpoint(model_id);
  const auto tmp = dest.parent_path() / ("." + dest.filename().string() + ".tmp");
  fs::create_directories(dest.parent_path());
  save_checkpoint(tmp, result.classifier, extra);
  commit_file(tmp, dest);
  store.write_json("checkpoints/" + safe_name(model_id) + ".metrics.json",
                   {{"config_hash", store.config_hash()},
                    {"model", model_id},
                    {"label", model_label(entry.spec)},
                    {"train_config_hash", config_hash(nlohmann::json(entry.train))},
                    {"heldout_accuracy", heldout},
                    {"history", result.history}});
  store.record_stage("train " + model_id, {{"heldout_accuracy", heldout}});
  return result;
}

Classifier load_trained(const RunStore& store, const std::string& model_id) {
  const auto path = store.checkpoint(model_id);
  if (!fs::exists(path)) {
    throw StoreError("model '" + model_id + "' has no checkpoint in " + store.dir().string() +
                     "; run `train --model " + model_id + "` first");
  }
  const auto manifest = read_checkpoint_manifest(path);
  const auto found = manifest.value("extra", nlohmann::json::object()).value("config_hash", std::string{});
  if (found != store.config_hash()) {
    throw StoreError("checkpoint " + path.string() + " carries config hash '" + found +
                     "' but the run is " + store.config_hash());
  }
  return load_checkpoint(path);
}

std::map<AttackKind, SuiteEntry> cmd_attack(const ExperimentConfig& config, const RunStore& store,
                                            const std::string& model_id, const LogFn& log) {
  (void)config.model(model_id);
  auto model = load_trained(store, model_id);
  const auto data = load_prepared(store).test;
  const auto clean = model.logits(data.pixels).argmax(1);
  std::map<AttackKind, SuiteEntry> suite;
  nlohmann::json summary = nlohmann::json::object();
  for (const auto kind : config.attack.attacks) {
    const AttackKind one[] = {kind};
    auto entry = std::move(run_attack_suite(model, data, config.attack.budget, one).at(kind));
    nlohmann::json s;
    if (entry.result) {
      save_examples(store, model_id, kind, *entry.result);
      const auto adv = model.logits(entry.result->adversarial.pixels).argmax(1);
      const auto v = compute_asr(clean, clean, adv, data.labels);
      s = {{"asr", v.asr ? nlohmann::json(*v.asr) : nlohmann::json(nullptr)},
           {"fooled", v.fooled},
           {"n_c", v.n_c},
           {"n", v.n},
           {"max_linf", entry.result->linf.numel() ? entry.result->linf.max().item<double>() : 0.0}};
      emit(log, model_id + " " + std::string(attack_name(kind)) + " white-box ASR " +
                    (v.asr ? std::to_string(*v.asr) : std::string("undefined")));
    } else {
      s = {{"error", entry.error}};
      emit(log, model_id + " " + std::string(attack_name(kind)) + " failed: " + entry.error);
    }
    summary[std::string(attack_name(kind))] = s;
    suite.emplace(kind, std::move(entry));
  }
  store.write_json("aes/" + safe_name(model_id) + "__whitebox.json",
                   {{"config_hash", store.config_hash()},
                    {"model", model_id},
                    {"budget", config.attack.budget},
                    {"attacks", summary}});
  store.record_stage("attack " + model_id, summary);
  return suite;
}

std::vector<TransferReport> cmd_transfer(const ExperimentConfig& config, const RunStore& store,
                                         const LogFn& log) {
  if (config.transfers.empty()) throw ConfigError("config has no transfer sections");
  const auto data = load_prepared(store).test;
  std::map<std::string, Classifier> loaded;
  const auto get = [&](const std::string& id) -> Classifier& {
    (void)config.model(id);
    auto it = loaded.find(id);
    if (it == loaded.end()) it = loaded.emplace(id, load_trained(store, id)).first;
    return it->second;
  };
  std::vector<TransferReport> reports;
  for (const auto& t : config.transfers) {
    std::vector<Classifier*> sources;
    std::vector<const Classifier*> targets;
    for (const auto& id : t.sources) sources.push_back(&get(id));
    for (const auto& id : t.targets) targets.push_back(&get(id));
    emit(log, "transfer '" + t.name + "': " + std::to_string(sources.size()) + " source(s), " +
                  std::to_string(targets.size()) + " target(s)");
    const AeCallback on_examples = [&](const Classifier& source, AttackKind kind,
                                       const AttackResult& result) {
      save_examples(store, source.spec().id, kind, result, t.domain);
      emit(log, "  crafted " + source.spec().id + " / " + std::string(attack_name(kind)));
    };
    auto report = run_matrix(sources, targets, config.attack.attacks, data, config.attack.budget,
                             t.framework, t.domain, on_examples);
    nlohmann::json j = report;
    j["config_hash"] = store.config_hash();
    j["name"] = t.name;
    j["subset_indices"] = "data/test_indices.txt";
    store.write_json("reports/" + safe_name(t.name) + ".json", j);
    for (const auto& s : report.sources) {
      store.write_text("reports/" + safe_name(t.name) + "__" + safe_name(s) + ".csv",
                       render_csv(report, s, store.config_hash()));
    }
    store.write_text("reports/" + safe_name(t.name) + ".txt", render_table(report, store.config_hash()));
    store.record_stage("transfer " + t.name, {{"cells", report.cells.size()}});
    reports.push_back(std::move(report));
  }
  return reports;
}

std::string cmd_report(const fs::path& run_dir) {
  const auto store = RunStore::existing(run_dir);
  const auto& hash = store.config_hash();
  const auto check = [&](const nlohmann::json& j, const std::string& what) {
    const auto found = j.value("config_hash", std::string{});
    if (found != hash) {
      throw StoreError(what + " carries config hash '" + found + "' but the run manifest says " + hash);
    }
  };
  nlohmann::json config_j = store.exists("config.json") ? store.read_json("config.json") : nlohmann::json::object();

  std::ostringstream os;
  os << "Run " << run_dir.filename().string() << "  (config " << hash << ")\n\n";

  std::vector<fs::path> metrics;
  if (fs::exists(store.path("checkpoints"))) {
    for (const auto& e : fs::directory_iterator(store.path("checkpoints"))) {
      if (e.path().string().ends_with(".metrics.json")) metrics.push_back(e.path());
    }
  }
  std::sort(metrics.begin(), metrics.end());
  os << "Models\n";
  std::set<std::string> trained;
  for (const auto& p : metrics) {
    const auto j = nlohmann::json::parse(read_file(p));
    check(j, p.string());
    trained.insert(j.at("model").get<std::string>());
    char line[200];
    std::snprintf(line, sizeof(line), "  %-20s %-22s held-out accuracy %6.2f%%  epochs %zu\n",
                  j.at("model").get<std::string>().c_str(), j.value("label", std::string{}).c_str(),
                  j.at("heldout_accuracy").get<double>(), j.at("history").size());
    os << line;
  }
  for (const auto& m : config_j.value("models", nlohmann::json::array())) {
    const auto id = m.value("id", std::string{});
    if (!trained.contains(id)) os << "  " << id << "  [missing: not trained]\n";
  }
  os << '\n';

  for (const auto& t : config_j.value("transfers", nlohmann::json::array())) {
    const auto name = t.value("name", std::string{});
    const auto rel = "reports/" + safe_name(name) + ".json";
    os << "== Transfer: " << name << " ==\n";
    if (!store.exists(rel)) {
      os << "[missing: transfer not run]\n";
      for (const auto& s : t.value("sources", std::vector<std::string>{})) {
        for (const auto& tg : t.value("targets", std::vector<std::string>{})) {
          os << "  " << s << " -> " << tg << ": missing\n";
        }
      }
      os << '\n';
      continue;
    }
    const auto j = store.read_json(rel);
    check(j, rel);
    os << render_table(j.get<TransferReport>(), hash) << '\n';
  }
  const auto text = os.str();
  store.write_text("reports/report-" + config_hash(nlohmann::json(text)).substr(0, 8) + ".txt", text);
  return text;
}

}  // namespace advtransfer
