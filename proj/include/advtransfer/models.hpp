#ifndef ADVTRANSFER_MODELS_HPP_
#define ADVTRANSFER_MODELS_HPP_

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "advtransfer/blockcipher.hpp"
#include "advtransfer/dataset.hpp"

namespace advtransfer {

enum class ModelFamily { kResNet18, kResNet50, kVgg16, kVit, kConvMixer };

std::string_view family_name(ModelFamily family);
ModelFamily parse_family(std::string_view name);
// Table row order: ResNet18, ResNet50, VGG16, ViT, ConvMixer.
int family_rank(ModelFamily family);
std::string_view family_display_name(ModelFamily family);

struct ConvMixerConfig {
  std::int64_t width = 128;
  std::int64_t depth = 4;
  std::int64_t patch_size = 4;
  std::int64_t kernel_size = 5;
  std::int64_t classes = kNumClasses;

  void validate(std::int64_t input_side) const;
};

struct ResNetConfig {
  std::int64_t base_width = 64;
  // 3x3 stride-1 stem without max-pool, for 32 x 32 inputs.
  bool small_input_stem = false;
  std::int64_t classes = kNumClasses;
};

struct VggConfig {
  std::int64_t base_width = 64;
  std::int64_t pool_side = 7;
  // 0 collapses the classifier to a single linear layer.
  std::int64_t hidden = 4096;
  std::int64_t classes = kNumClasses;
};

struct VitConfig {
  std::int64_t patch_size = 16;
  std::int64_t dim = 768;
  std::int64_t depth = 12;
  std::int64_t heads = 12;
  std::int64_t mlp_dim = 3072;
  std::int64_t classes = kNumClasses;
};

using ArchitectureConfig = std::variant<ConvMixerConfig, ResNetConfig, VggConfig, VitConfig>;

// Everything needed to rebuild a classifier. An attached cipher makes it an
// encrypted model: it is trained on and queried through that key.
struct ModelSpec {
  std::string id;
  ModelFamily family = ModelFamily::kConvMixer;
  std::int64_t input_side = kCorpusSide;
  ArchitectureConfig config = ConvMixerConfig{};
  std::optional<CipherKey> cipher;
  std::string weights_ref;
  bool pretrained = false;
  std::string pretrained_weights;
  std::uint64_t init_seed = 0;

  std::int64_t classes() const;
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

// Default hyperparameters of a family at the given input side.
ArchitectureConfig default_config(ModelFamily family, std::int64_t input_side);

// Network body shared by all families: images in, logits out.
class ImageNetwork : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(torch::Tensor x) = 0;
};
using NetworkPtr = std::shared_ptr<ImageNetwork>;

NetworkPtr make_network(const ModelSpec& spec);
std::int64_t parameter_count(const torch::nn::Module& module);

// Per-example loss, shape n, for the logits of batch rows [offset, offset + n).
using LossFn = std::function<torch::Tensor(const torch::Tensor& logits, std::int64_t offset)>;

struct Prediction {
  torch::Tensor labels;  // int64, N
  torch::Tensor logits;  // float32, N x classes
};

// A network plus its inference pipeline. Encrypted classifiers take plain
// images and apply their own cipher before the network. Copies share weights.
class Classifier {
 public:
  struct Gradient {
    torch::Tensor loss;    // N
    torch::Tensor logits;  // N x classes
    torch::Tensor grad;    // same shape as the input
  };

  Classifier(ModelSpec spec, NetworkPtr network, bool pretrained_loaded = false);

  const ModelSpec& spec() const { return spec_; }
  const NetworkPtr& network() const { return network_; }
  bool encrypted() const { return spec_.cipher.has_value(); }
  const std::optional<TransformParams>& cipher_params() const { return params_; }
  std::int64_t classes() const { return spec_.classes(); }
  // Whether the backbone really came from pretrained weights.
  bool pretrained_loaded() const { return pretrained_loaded_; }

  // Differentiable, in whatever train/eval mode the network is in.
  torch::Tensor forward(const torch::Tensor& plain) const;

  // Inference-mode scores without autograd, evaluated in chunks.
  torch::Tensor logits(const torch::Tensor& plain) const;

  // Input gradient of sum(loss(logits)) in inference mode. This is the only
  // gradient entry point; each call increments gradient_calls().
  Gradient loss_gradient(const torch::Tensor& plain, const LossFn& loss);

  std::int64_t gradient_calls() const { return gradient_calls_; }
  std::int64_t chunk_size() const;

 private:
  void check_input(const torch::Tensor& plain) const;

  ModelSpec spec_;
  NetworkPtr network_;
  std::optional<TransformParams> params_;
  bool pretrained_loaded_ = false;
  std::int64_t gradient_calls_ = 0;
};

Classifier build_classifier(const ModelSpec& spec);
Classifier build_convmixer(const ConvMixerConfig& cfg, std::int64_t input_side,
                           std::uint64_t init_seed = 0);
// One of the five families with its default configuration. With `pretrained`
// the backbone is loaded from `pretrained_weights` when that file exists.
Classifier build_baseline(ModelFamily family, bool pretrained, std::int64_t input_side = 224,
                          const std::string& pretrained_weights = {});

Prediction predict(const Classifier& classifier, const ImageBatch& batch);
double accuracy(const Classifier& classifier, const ImageBatch& batch);

struct TrainConfig {
  std::int64_t epochs = 20;
  std::int64_t batch_size = 128;
  double learning_rate = 0.01;
  double weight_decay = 0.01;
  double warmup_fraction = 0.2;
  bool augment = false;       // random flip and 4-pixel reflect-padded crop
  std::int64_t cutout = 0;    // side of a zeroed square per image; 0 disables
  double mixup_alpha = 0.0;   // Beta(alpha, alpha) mixing of batch pairs; 0 disables
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);
std::string config_hash(const nlohmann::json& j);

struct EpochMetrics {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;  // through the model's own cipher
};

void to_json(nlohmann::json& j, const EpochMetrics& m);
void from_json(const nlohmann::json& j, EpochMetrics& m);

struct TrainResult {
  Classifier classifier;
  std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// AdamW with linear warm-up then cosine decay. Encrypted specs see every
// training batch through their cipher. Throws DivergenceError on a
// non-finite loss.
TrainResult train(const ModelSpec& spec, const ImageBatch& train_data, const ImageBatch* heldout,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

// Checkpoint archive: every parameter and buffer plus an embedded JSON
// manifest {spec, train_config_hash, extra}.
void save_checkpoint(const std::filesystem::path& path, const Classifier& classifier,
                     const nlohmann::json& extra = {});
Classifier load_checkpoint(const std::filesystem::path& path);
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);

}  // namespace advtransfer

#endif  // ADVTRANSFER_MODELS_HPP_
