#include "advtransfer/models.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include "advtransfer/errors.hpp"
#include "advtransfer/prng.hpp"

namespace advtransfer {

namespace {

constexpr std::string_view kManifestKey = "manifest";

// Beta(a, a) by Johnk's rejection method, in log space so small a does not
// underflow. Only uniforms from rng are used.
double symmetric_beta(double a, Xoshiro256& rng) {
  for (;;) {
    const double lx = std::log(1.0 - rng.uniform()) / a;
    const double ly = std::log(1.0 - rng.uniform()) / a;
    const double top = std::max(lx, ly);
    const double lsum = top + std::log(std::exp(lx - top) + std::exp(ly - top));
    if (lsum <= 0.0) return std::exp(lx - lsum);
  }
}

struct FamilyInfo {
  ModelFamily family;
  std::string_view name;
  std::string_view display;
};

constexpr std::array<FamilyInfo, 5> kFamilies = {{
    {ModelFamily::kResNet18, "resnet18", "ResNet18"},
    {ModelFamily::kResNet50, "resnet50", "ResNet50"},
    {ModelFamily::kVgg16, "vgg16", "VGG16"},
    {ModelFamily::kVit, "vit", "ViT"},
    {ModelFamily::kConvMixer, "convmixer", "ConvMixer"},
}};

template <typename T>
void assign_if(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

nlohmann::json config_to_json(const ArchitectureConfig& config) {
  return std::visit(
      [](const auto& c) -> nlohmann::json {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, ConvMixerConfig>) {
          return {{"width", c.width}, {"depth", c.depth}, {"patch_size", c.patch_size},
                  {"kernel_size", c.kernel_size}, {"classes", c.classes}};
        } else if constexpr (std::is_same_v<C, ResNetConfig>) {
          return {{"base_width", c.base_width}, {"small_input_stem", c.small_input_stem},
                  {"classes", c.classes}};
        } else if constexpr (std::is_same_v<C, VggConfig>) {
          return {{"base_width", c.base_width}, {"pool_side", c.pool_side}, {"hidden", c.hidden},
                  {"classes", c.classes}};
        } else {
          return {{"patch_size", c.patch_size}, {"dim", c.dim},         {"depth", c.depth},
                  {"heads", c.heads},           {"mlp_dim", c.mlp_dim}, {"classes", c.classes}};
        }
      },
      config);
}

void config_from_json(const nlohmann::json& j, ArchitectureConfig& config) {
  std::visit(
      [&j](auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, ConvMixerConfig>) {
          assign_if(j, "width", c.width);
          assign_if(j, "depth", c.depth);
          assign_if(j, "patch_size", c.patch_size);
          assign_if(j, "kernel_size", c.kernel_size);
        } else if constexpr (std::is_same_v<C, ResNetConfig>) {
          assign_if(j, "base_width", c.base_width);
          assign_if(j, "small_input_stem", c.small_input_stem);
        } else if constexpr (std::is_same_v<C, VggConfig>) {
          assign_if(j, "base_width", c.base_width);
          assign_if(j, "pool_side", c.pool_side);
          assign_if(j, "hidden", c.hidden);
        } else {
          assign_if(j, "patch_size", c.patch_size);
          assign_if(j, "dim", c.dim);
          assign_if(j, "depth", c.depth);
          assign_if(j, "heads", c.heads);
          assign_if(j, "mlp_dim", c.mlp_dim);
        }
        assign_if(j, "classes", c.classes);
      },
      config);
}

double learning_rate_at(const TrainConfig& config, std::int64_t step, std::int64_t total) {
  const auto warmup = static_cast<std::int64_t>(std::floor(config.warmup_fraction * total));
  if (step < warmup) return config.learning_rate * static_cast<double>(step + 1) / warmup;
  const auto span = std::max<std::int64_t>(total - warmup, 1);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return 0.5 * config.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
}

void set_learning_rate(torch::optim::AdamW& optimizer, double lr) {
  for (auto& group : optimizer.param_groups()) {
    static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
  }
}

void load_pretrained_backbone(ImageNetwork& network, const std::filesystem::path& path) {
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  torch::NoGradGuard no_grad;
  for (auto& item : network.named_parameters()) {
    if (item.key().rfind("head", 0) == 0) continue;
    torch::Tensor stored;
    if (!archive.try_read("param/" + item.key(), stored)) continue;
    if (stored.sizes() == item.value().sizes()) item.value().copy_(stored);
  }
}

}  // namespace

std::string_view family_name(ModelFamily family) {
  for (const auto& info : kFamilies) {
    if (info.family == family) return info.name;
  }
  return "?";
}

std::string_view family_display_name(ModelFamily family) {
  for (const auto& info : kFamilies) {
    if (info.family == family) return info.display;
  }
  return "?";
}

int family_rank(ModelFamily family) { return static_cast<int>(family); }

ModelFamily parse_family(std::string_view name) {
  for (const auto& info : kFamilies) {
    if (info.name == name || info.display == name) return info.family;
  }
  throw ConfigError("unknown model family '" + std::string(name) +
                    "' (expected resnet18, resnet50, vgg16, vit or convmixer)");
}

std::int64_t ModelSpec::classes() const {
  return std::visit([](const auto& c) { return c.classes; }, config);
}

void to_json(nlohmann::json& j, const ModelSpec& spec) {
  j = nlohmann::json{{"id", spec.id},
                     {"family", family_name(spec.family)},
                     {"input_side", spec.input_side},
                     {"config", config_to_json(spec.config)},
                     {"weights_ref", spec.weights_ref},
                     {"pretrained", spec.pretrained},
                     {"pretrained_weights", spec.pretrained_weights},
                     {"init_seed", spec.init_seed}};
  j["cipher"] = spec.cipher ? nlohmann::json(*spec.cipher) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ModelSpec& spec) {
  spec.id = j.value("id", std::string{});
  spec.family = parse_family(j.at("family").get<std::string>());
  spec.input_side = j.value("input_side", kCorpusSide);
  spec.config = default_config(spec.family, spec.input_side);
  if (j.contains("config")) config_from_json(j.at("config"), spec.config);
  spec.weights_ref = j.value("weights_ref", std::string{});
  spec.pretrained = j.value("pretrained", false);
  spec.pretrained_weights = j.value("pretrained_weights", std::string{});
  spec.init_seed = j.value("init_seed", std::uint64_t{0});
  spec.cipher.reset();
  if (j.contains("cipher") && !j.at("cipher").is_null()) spec.cipher = j.at("cipher").get<CipherKey>();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"warmup_fraction", c.warmup_fraction},
                     {"augment", c.augment},
                     {"cutout", c.cutout},
                     {"mixup_alpha", c.mixup_alpha},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  assign_if(j, "epochs", c.epochs);
  assign_if(j, "batch_size", c.batch_size);
  assign_if(j, "learning_rate", c.learning_rate);
  assign_if(j, "weight_decay", c.weight_decay);
  assign_if(j, "warmup_fraction", c.warmup_fraction);
  assign_if(j, "augment", c.augment);
  assign_if(j, "cutout", c.cutout);
  assign_if(j, "mixup_alpha", c.mixup_alpha);
  assign_if(j, "seed", c.seed);
  if (c.epochs < 0 || c.batch_size < 1 || c.learning_rate <= 0.0) {
    throw ConfigError("train config needs epochs >= 0, batch_size >= 1, learning_rate > 0");
  }
  if (c.cutout < 0 || c.mixup_alpha < 0.0) {
    throw ConfigError("train config needs cutout >= 0 and mixup_alpha >= 0");
  }
}

void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = nlohmann::json{{"epoch", m.epoch},
                     {"train_loss", m.train_loss},
                     {"train_accuracy", m.train_accuracy},
                     {"heldout_accuracy", m.heldout_accuracy}};
}

void from_json(const nlohmann::json& j, EpochMetrics& m) {
  m.epoch = j.at("epoch").get<std::int64_t>();
  m.train_loss = j.at("train_loss").get<double>();
  m.train_accuracy = j.at("train_accuracy").get<double>();
  m.heldout_accuracy = j.at("heldout_accuracy").get<double>();
}

std::string config_hash(const nlohmann::json& j) {
  // FNV-1a over the canonical (sorted-key) dump.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ----------------------------------------------------------------- Classifier

Classifier::Classifier(ModelSpec spec, NetworkPtr network, bool pretrained_loaded)
    : spec_(std::move(spec)), network_(std::move(network)), pretrained_loaded_(pretrained_loaded) {
  if (spec_.cipher) {
    if (spec_.input_side % spec_.cipher->block_size != 0) {
      throw DimensionError("cipher block size " + std::to_string(spec_.cipher->block_size) +
                           " does not tile the model input side " +
                           std::to_string(spec_.input_side));
    }
    params_ = derive_params(*spec_.cipher);
  }
  network_->eval();
}

void Classifier::check_input(const torch::Tensor& plain) const {
  if (plain.dim() != 4 || plain.size(1) != 3 || plain.size(2) != spec_.input_side ||
      plain.size(3) != spec_.input_side) {
    std::ostringstream os;
    os << "model '" << spec_.id << "' expects N x 3 x " << spec_.input_side << " x "
       << spec_.input_side << " inputs, got " << plain.sizes();
    throw DimensionError(os.str());
  }
}

std::int64_t Classifier::chunk_size() const {
  const auto pixels = 3 * spec_.input_side * spec_.input_side;
  return std::clamp<std::int64_t>(600000 / pixels, 1, 256);
}

torch::Tensor Classifier::forward(const torch::Tensor& plain) const {
  check_input(plain);
  const auto x = params_ ? encrypt_pixels(plain, *params_) : plain;
  return network_->forward(x);
}

torch::Tensor Classifier::logits(const torch::Tensor& plain) const {
  check_input(plain);
  torch::NoGradGuard no_grad;
  network_->eval();
  const auto n = plain.size(0);
  if (n == 0) return torch::empty({0, classes()}, plain.options());
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < n; start += chunk_size()) {
    parts.push_back(forward(plain.narrow(0, start, std::min(chunk_size(), n - start))));
  }
  return torch::cat(parts);
}

Classifier::Gradient Classifier::loss_gradient(const torch::Tensor& plain, const LossFn& loss) {
  check_input(plain);
  ++gradient_calls_;
  network_->eval();
  const auto n = plain.size(0);
  std::vector<torch::Tensor> losses, logit_parts, grads;
  for (std::int64_t start = 0; start < n; start += chunk_size()) {
    auto x = plain.narrow(0, start, std::min(chunk_size(), n - start)).detach().clone();
    x.set_requires_grad(true);
    const auto z = forward(x);
    const auto l = loss(z, start);
    auto g = torch::autograd::grad({l.sum()}, {x})[0];
    losses.push_back(l.detach());
    logit_parts.push_back(z.detach());
    grads.push_back(g.detach());
  }
  if (losses.empty()) return {torch::empty({0}), torch::empty({0, classes()}), plain.clone()};
  return {torch::cat(losses), torch::cat(logit_parts), torch::cat(grads)};
}

Classifier build_classifier(const ModelSpec& spec) {
  torch::manual_seed(spec.init_seed);
  auto network = make_network(spec);
  if (spec.pretrained) {
    if (spec.family == ModelFamily::kVit && spec.input_side != 224) {
      throw ConfigError("pretrained ViT weights expect 3 x 224 x 224 inputs");
    }
    if (!spec.pretrained_weights.empty() && std::filesystem::exists(spec.pretrained_weights)) {
      load_pretrained_backbone(*network, spec.pretrained_weights);
      return Classifier(spec, network, /*pretrained_loaded=*/true);
    }
  }
  return Classifier(spec, network);
}

Classifier build_convmixer(const ConvMixerConfig& cfg, std::int64_t input_side,
                           std::uint64_t init_seed) {
  cfg.validate(input_side);
  ModelSpec spec;
  spec.id = "convmixer";
  spec.family = ModelFamily::kConvMixer;
  spec.input_side = input_side;
  spec.config = cfg;
  spec.init_seed = init_seed;
  return build_classifier(spec);
}

Classifier build_baseline(ModelFamily family, bool pretrained, std::int64_t input_side,
                          const std::string& pretrained_weights) {
  ModelSpec spec;
  spec.id = std::string(family_name(family));
  spec.family = family;
  spec.input_side = input_side;
  spec.config = default_config(family, input_side);
  spec.pretrained = pretrained;
  spec.pretrained_weights = pretrained_weights;
  return build_classifier(spec);
}

Prediction predict(const Classifier& classifier, const ImageBatch& batch) {
  if (batch.encrypted_with) {
    throw CipherError("predict expects plain images; model '" + classifier.spec().id +
                      "' applies its own cipher");
  }
  Prediction p;
  p.logits = classifier.logits(batch.pixels);
  p.labels = p.logits.argmax(1);
  return p;
}

double accuracy(const Classifier& classifier, const ImageBatch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("accuracy of an empty batch is undefined");
  const auto p = predict(classifier, batch);
  const auto correct = p.labels.eq(batch.labels).sum().item<std::int64_t>();
  return 100.0 * static_cast<double>(correct) / static_cast<double>(batch.size());
}

// ------------------------------------------------------------------- training

TrainResult train(const ModelSpec& spec, const ImageBatch& train_data, const ImageBatch* heldout,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  Classifier classifier = build_classifier(spec);
  std::vector<EpochMetrics> history;
  if (config.epochs == 0) return {classifier, history};
  if (train_data.size() == 0) throw std::invalid_argument("training set is empty");
  if (train_data.encrypted_with) {
    throw CipherError("train expects plain images; encrypted specs apply their own cipher");
  }

  torch::manual_seed(config.seed);
  auto& net = *classifier.network();
  torch::optim::AdamW optimizer(
      net.parameters(),
      torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
  Xoshiro256 rng(mix64(config.seed ^ 0x7472616e5f6f7264ULL));

  const auto n = train_data.size();
  const auto steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const auto total_steps = steps_per_epoch * config.epochs;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::int64_t step = 0;

  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    net.train();
    std::iota(order.begin(), order.end(), std::int64_t{0});
    shuffle(std::span<std::int64_t>(order), rng);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      const auto count = std::min(config.batch_size, n - start);
      const auto index = torch::tensor(
          std::vector<std::int64_t>(order.begin() + start, order.begin() + start + count));
      auto x = train_data.pixels.index_select(0, index);
      const auto y = train_data.labels.index_select(0, index);
      if (config.augment) x = augment_flip_crop(x, rng);
      if (config.cutout > 0) x = augment_cutout(x, config.cutout, rng);
      double lam = 1.0;
      torch::Tensor partner;
      if (config.mixup_alpha > 0.0) {
        lam = symmetric_beta(config.mixup_alpha, rng);
        std::vector<std::int64_t> perm(static_cast<std::size_t>(count));
        std::iota(perm.begin(), perm.end(), std::int64_t{0});
        shuffle(std::span<std::int64_t>(perm), rng);
        partner = torch::tensor(perm);
        x = lam * x + (1.0 - lam) * x.index_select(0, partner);
      }

      set_learning_rate(optimizer, learning_rate_at(config, step++, total_steps));
      optimizer.zero_grad();
      const auto logits = classifier.forward(x);
      auto loss = torch::nn::functional::cross_entropy(logits, y);
      if (partner.defined()) {
        loss = lam * loss + (1.0 - lam) * torch::nn::functional::cross_entropy(
                                              logits, y.index_select(0, partner));
      }
      const double loss_value = loss.item<double>();
      if (!std::isfinite(loss_value)) {
        std::ostringstream os;
        os << "training '" << spec.id << "' diverged: loss " << loss_value << " at epoch "
           << epoch << ", step " << step;
        throw DivergenceError(os.str());
      }
      loss.backward();
      optimizer.step();
      loss_sum += loss_value * static_cast<double>(count);
      correct += logits.detach().argmax(1).eq(y).sum().item<std::int64_t>();
    }
    net.eval();
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(n);
    m.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    m.heldout_accuracy = heldout && heldout->size() > 0 ? accuracy(classifier, *heldout) : 0.0;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return {classifier, history};
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& path, const Classifier& classifier,
                     const nlohmann::json& extra) {
  torch::serialize::OutputArchive archive;
  const auto& net = *classifier.network();
  for (const auto& item : net.named_parameters()) archive.write("param/" + item.key(), item.value());
  for (const auto& item : net.named_buffers()) {
    archive.write("buffer/" + item.key(), item.value(), /*is_buffer=*/true);
  }
  nlohmann::json manifest{{"spec", classifier.spec()},
                          {"pretrained_loaded", classifier.pretrained_loaded()},
                          {"extra", extra}};
  archive.write(std::string(kManifestKey), c10::IValue(manifest.dump()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  try {
    archive.save_to(path.string());
  } catch (const c10::Error& e) {
    throw StoreError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw StoreError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    c10::IValue value;
    archive.read(std::string(kManifestKey), value);
    return nlohmann::json::parse(value.toStringRef());
  } catch (const c10::Error& e) {
    throw StoreError("unreadable checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

Classifier load_checkpoint(const std::filesystem::path& path) {
  const auto manifest = read_checkpoint_manifest(path);
  const auto spec = manifest.at("spec").get<ModelSpec>();
  torch::manual_seed(spec.init_seed);
  Classifier classifier(spec, make_network(spec), manifest.value("pretrained_loaded", false));
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  auto& net = *classifier.network();
  torch::NoGradGuard no_grad;
  for (auto& item : net.named_parameters()) {
    torch::Tensor stored;
    archive.read("param/" + item.key(), stored);
    item.value().copy_(stored);
  }
  for (auto& item : net.named_buffers()) {
    torch::Tensor stored;
    archive.read("buffer/" + item.key(), stored, /*is_buffer=*/true);
    item.value().copy_(stored);
  }
  net.eval();
  return classifier;
}

}  // namespace advtransfer
