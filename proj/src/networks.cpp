// Architectures of the five classifier families.

#include <cmath>
#include <sstream>

#include "advtransfer/errors.hpp"
#include "advtransfer/models.hpp"

namespace advtransfer {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

// ---------------------------------------------------------------- ConvMixer

// Patch embedding, then `depth` mixer layers:
//   x = x + BN(GELU(depthwise(x)));  x = BN(GELU(pointwise(x)))
// and a global-average-pool linear head.
class ConvMixerNet : public ImageNetwork {
 public:
  explicit ConvMixerNet(const ConvMixerConfig& cfg) {
    const auto w = cfg.width;
    embed_ = register_module(
        "embed", nn::Conv2d(nn::Conv2dOptions(3, w, cfg.patch_size).stride(cfg.patch_size)));
    embed_norm_ = register_module("embed_norm", nn::BatchNorm2d(w));
    for (std::int64_t i = 0; i < cfg.depth; ++i) {
      const auto tag = std::to_string(i);
      depthwise_.push_back(register_module(
          "depthwise" + tag,
          nn::Conv2d(nn::Conv2dOptions(w, w, cfg.kernel_size).groups(w).padding(torch::kSame))));
      depthwise_norm_.push_back(register_module("depthwise_norm" + tag, nn::BatchNorm2d(w)));
      pointwise_.push_back(
          register_module("pointwise" + tag, nn::Conv2d(nn::Conv2dOptions(w, w, 1))));
      pointwise_norm_.push_back(register_module("pointwise_norm" + tag, nn::BatchNorm2d(w)));
    }
    head_ = register_module("head", nn::Linear(w, cfg.classes));
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = embed_norm_(torch::gelu(embed_(x)));
    for (std::size_t i = 0; i < depthwise_.size(); ++i) {
      x = x + depthwise_norm_[i](torch::gelu(depthwise_[i](x)));
      x = pointwise_norm_[i](torch::gelu(pointwise_[i](x)));
    }
    x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
    return head_(x);
  }

 private:
  nn::Conv2d embed_{nullptr};
  nn::BatchNorm2d embed_norm_{nullptr};
  std::vector<nn::Conv2d> depthwise_;
  std::vector<nn::BatchNorm2d> depthwise_norm_;
  std::vector<nn::Conv2d> pointwise_;
  std::vector<nn::BatchNorm2d> pointwise_norm_;
  nn::Linear head_{nullptr};
};

// ------------------------------------------------------------------- ResNet

struct ResidualBlockImpl : nn::Module {
  ResidualBlockImpl(std::int64_t in, std::int64_t planes, std::int64_t stride, bool bottleneck)
      : bottleneck(bottleneck) {
    const auto expansion = bottleneck ? 4 : 1;
    const auto out = planes * expansion;
    if (bottleneck) {
      conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, planes, 1).bias(false)));
      conv2 = register_module(
          "conv2",
          nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).stride(stride).padding(1).bias(false)));
      conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(planes, out, 1).bias(false)));
      bn3 = register_module("bn3", nn::BatchNorm2d(out));
    } else {
      conv1 = register_module(
          "conv1", nn::Conv2d(nn::Conv2dOptions(in, planes, 3).stride(stride).padding(1).bias(false)));
      conv2 = register_module(
          "conv2", nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).padding(1).bias(false)));
    }
    bn1 = register_module("bn1", nn::BatchNorm2d(planes));
    bn2 = register_module("bn2", nn::BatchNorm2d(planes));
    if (stride != 1 || in != out) {
      shortcut = register_module(
          "shortcut", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                     nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    if (bottleneck) {
      y = torch::relu(bn2(conv2(y)));
      y = bn3(conv3(y));
    } else {
      y = bn2(conv2(y));
    }
    return torch::relu(y + (shortcut ? shortcut->forward(x) : x));
  }

  bool bottleneck;
  nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(ResidualBlock);

class ResNetNet : public ImageNetwork {
 public:
  ResNetNet(const ResNetConfig& cfg, bool bottleneck, std::array<int, 4> blocks)
      : small_stem_(cfg.small_input_stem) {
    const auto w = cfg.base_width;
    stem_ = register_module(
        "stem", small_stem_
                    ? nn::Conv2d(nn::Conv2dOptions(3, w, 3).stride(1).padding(1).bias(false))
                    : nn::Conv2d(nn::Conv2dOptions(3, w, 7).stride(2).padding(3).bias(false)));
    stem_norm_ = register_module("stem_norm", nn::BatchNorm2d(w));
    std::int64_t in = w;
    const std::int64_t expansion = bottleneck ? 4 : 1;
    for (int stage = 0; stage < 4; ++stage) {
      const auto planes = w << stage;
      nn::Sequential seq;
      for (int b = 0; b < blocks[stage]; ++b) {
        const std::int64_t stride = (stage > 0 && b == 0) ? 2 : 1;
        seq->push_back(ResidualBlock(in, planes, stride, bottleneck));
        in = planes * expansion;
      }
      stages_.push_back(register_module("stage" + std::to_string(stage + 1), seq));
    }
    head_ = register_module("head", nn::Linear(in, cfg.classes));
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = torch::relu(stem_norm_(stem_(x)));
    if (!small_stem_) x = F::max_pool2d(x, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    for (auto& stage : stages_) x = stage->forward(x);
    x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
    return head_(x);
  }

 private:
  bool small_stem_;
  nn::Conv2d stem_{nullptr};
  nn::BatchNorm2d stem_norm_{nullptr};
  std::vector<nn::Sequential> stages_;
  nn::Linear head_{nullptr};
};

// ------------------------------------------------------------------- VGG16

class VggNet : public ImageNetwork {
 public:
  explicit VggNet(const VggConfig& cfg) : pool_side_(cfg.pool_side) {
    // Configuration "D"; 0 marks a 2x2 max-pool.
    constexpr std::array<int, 18> kLayout = {1, 1, 0, 2, 2, 0, 4, 4, 4, 0, 8, 8, 8, 0, 8, 8, 8, 0};
    std::int64_t in = 3;
    int conv_index = 0;
    for (const auto multiple : kLayout) {
      if (multiple == 0) {
        features_->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2).stride(2)));
        continue;
      }
      const auto out = cfg.base_width * multiple;
      features_->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
      features_->push_back(nn::BatchNorm2d(out));
      features_->push_back(nn::ReLU());
      in = out;
      ++conv_index;
    }
    register_module("features", features_);
    const auto flat = in * cfg.pool_side * cfg.pool_side;
    if (cfg.hidden > 0) {
      classifier_->push_back(nn::Linear(flat, cfg.hidden));
      classifier_->push_back(nn::ReLU());
      classifier_->push_back(nn::Dropout(0.5));
      classifier_->push_back(nn::Linear(cfg.hidden, cfg.hidden));
      classifier_->push_back(nn::ReLU());
      classifier_->push_back(nn::Dropout(0.5));
      classifier_->push_back(nn::Linear(cfg.hidden, cfg.classes));
    } else {
      classifier_->push_back(nn::Linear(flat, cfg.classes));
    }
    register_module("classifier", classifier_);
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = features_->forward(x);
    x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(pool_side_)).flatten(1);
    return classifier_->forward(x);
  }

 private:
  std::int64_t pool_side_;
  nn::Sequential features_;
  nn::Sequential classifier_;
};

// --------------------------------------------------------------------- ViT

struct EncoderBlockImpl : nn::Module {
  EncoderBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_dim) : heads(heads) {
    norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
    qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
    proj = register_module("proj", nn::Linear(dim, dim));
    norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", nn::Linear(dim, mlp_dim));
    fc2 = register_module("fc2", nn::Linear(mlp_dim, dim));
  }

  torch::Tensor forward(torch::Tensor x) {
    const auto n = x.size(0);
    const auto t = x.size(1);
    const auto dim = x.size(2);
    const auto head_dim = dim / heads;
    auto qkv_out = qkv(norm1(x)).reshape({n, t, 3, heads, head_dim}).permute({2, 0, 3, 1, 4});
    auto q = qkv_out[0];
    auto k = qkv_out[1];
    auto v = qkv_out[2];
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) /
                                   std::sqrt(static_cast<double>(head_dim)),
                               -1);
    auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({n, t, dim});
    x = x + proj(mixed);
    return x + fc2(torch::gelu(fc1(norm2(x))));
  }

  std::int64_t heads;
  nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(EncoderBlock);

class VitNet : public ImageNetwork {
 public:
  VitNet(const VitConfig& cfg, std::int64_t input_side) {
    const auto tokens = (input_side / cfg.patch_size) * (input_side / cfg.patch_size);
    embed_ = register_module("embed", nn::Conv2d(nn::Conv2dOptions(3, cfg.dim, cfg.patch_size)
                                                     .stride(cfg.patch_size)));
    cls_token_ = register_parameter("cls_token", torch::zeros({1, 1, cfg.dim}));
    position_ = register_parameter("position", torch::randn({1, tokens + 1, cfg.dim}) * 0.02);
    for (std::int64_t i = 0; i < cfg.depth; ++i) {
      blocks_.push_back(register_module("block" + std::to_string(i),
                                        EncoderBlock(cfg.dim, cfg.heads, cfg.mlp_dim)));
    }
    norm_ = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({cfg.dim})));
    head_ = register_module("head", nn::Linear(cfg.dim, cfg.classes));
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = embed_(x).flatten(2).transpose(1, 2);
    x = torch::cat({cls_token_.expand({x.size(0), 1, x.size(2)}), x}, 1) + position_;
    for (auto& block : blocks_) x = block->forward(x);
    return head_(norm_(x).select(1, 0));
  }

 private:
  nn::Conv2d embed_{nullptr};
  torch::Tensor cls_token_;
  torch::Tensor position_;
  std::vector<EncoderBlock> blocks_;
  nn::LayerNorm norm_{nullptr};
  nn::Linear head_{nullptr};
};

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void ConvMixerConfig::validate(std::int64_t input_side) const {
  require(width >= 1, "convmixer width must be >= 1");
  require(depth >= 1, "convmixer depth must be >= 1");
  require(kernel_size >= 1, "convmixer kernel_size must be >= 1");
  require(classes >= 2, "classifier needs at least 2 classes");
  require(patch_size >= 1 && input_side % patch_size == 0,
          "input side " + std::to_string(input_side) + " is not divisible by patch size " +
              std::to_string(patch_size));
}

NetworkPtr make_network(const ModelSpec& spec) {
  const auto side = spec.input_side;
  require(side >= 1, "input_side must be >= 1");
  switch (spec.family) {
    case ModelFamily::kConvMixer: {
      const auto& cfg = std::get<ConvMixerConfig>(spec.config);
      cfg.validate(side);
      return std::make_shared<ConvMixerNet>(cfg);
    }
    case ModelFamily::kResNet18:
    case ModelFamily::kResNet50: {
      const auto& cfg = std::get<ResNetConfig>(spec.config);
      require(cfg.base_width >= 1 && cfg.classes >= 2, "invalid resnet config");
      const bool deep = spec.family == ModelFamily::kResNet50;
      return std::make_shared<ResNetNet>(cfg, deep,
                                         deep ? std::array<int, 4>{3, 4, 6, 3}
                                              : std::array<int, 4>{2, 2, 2, 2});
    }
    case ModelFamily::kVgg16: {
      const auto& cfg = std::get<VggConfig>(spec.config);
      require(cfg.base_width >= 1 && cfg.pool_side >= 1 && cfg.hidden >= 0 && cfg.classes >= 2,
              "invalid vgg16 config");
      require(side % 32 == 0, "vgg16 needs an input side divisible by 32");
      return std::make_shared<VggNet>(cfg);
    }
    case ModelFamily::kVit: {
      const auto& cfg = std::get<VitConfig>(spec.config);
      require(cfg.patch_size >= 1 && side % cfg.patch_size == 0,
              "input side " + std::to_string(side) + " is not divisible by vit patch size " +
                  std::to_string(cfg.patch_size));
      require(cfg.heads >= 1 && cfg.dim % cfg.heads == 0, "vit dim must be divisible by heads");
      require(cfg.depth >= 1 && cfg.mlp_dim >= 1 && cfg.classes >= 2, "invalid vit config");
      return std::make_shared<VitNet>(cfg, side);
    }
  }
  throw ConfigError("unknown model family");
}

ArchitectureConfig default_config(ModelFamily family, std::int64_t input_side) {
  const bool small = input_side <= 64;
  switch (family) {
    case ModelFamily::kConvMixer:
      return ConvMixerConfig{.width = small ? 128 : 256,
                             .depth = small ? 4 : 8,
                             .patch_size = small ? 4 : 16,
                             .kernel_size = small ? 5 : 9};
    case ModelFamily::kResNet18:
    case ModelFamily::kResNet50:
      return ResNetConfig{.base_width = 64, .small_input_stem = small};
    case ModelFamily::kVgg16:
      return small ? VggConfig{.base_width = 64, .pool_side = 1, .hidden = 512} : VggConfig{};
    case ModelFamily::kVit:
      return small ? VitConfig{.patch_size = 4, .dim = 192, .depth = 6, .heads = 3, .mlp_dim = 384}
                   : VitConfig{};
  }
  throw ConfigError("unknown model family");
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t total = 0;
  for (const auto& p : module.parameters()) total += p.numel();
  return total;
}

}  // namespace advtransfer
