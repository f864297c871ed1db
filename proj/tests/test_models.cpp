#include "doctest_torch.hpp"

#include <set>

#include "advtransfer/attacks.hpp"
#include "advtransfer/errors.hpp"
#include "advtransfer/models.hpp"
#include "test_support.hpp"

using namespace advtransfer;

namespace {

constexpr ModelFamily kFamilies[] = {ModelFamily::kResNet18, ModelFamily::kResNet50,
                                     ModelFamily::kVgg16, ModelFamily::kVit,
                                     ModelFamily::kConvMixer};

// Hand count: conv weights + biases, two batch-norm affine vectors per norm.
std::int64_t convmixer_params(std::int64_t w, std::int64_t depth, std::int64_t p, std::int64_t k,
                              std::int64_t classes) {
  const auto embed = 3 * p * p * w + w + 2 * w;
  const auto layer = (w * k * k + w + 2 * w) + (w * w + w + 2 * w);
  const auto head = w * classes + classes;
  return embed + depth * layer + head;
}

// Same logits for every input.
class ConstantNet : public ImageNetwork {
 public:
  explicit ConstantNet(std::int64_t cls) : cls_(cls) {}
  torch::Tensor forward(torch::Tensor x) override {
    auto z = torch::zeros({x.size(0), kNumClasses}, x.options());
    z.select(1, cls_).fill_(1.0);
    return z + 0.0 * x.sum();
  }

 private:
  std::int64_t cls_;
};

const ImageBatch& test_split() {
  static const ImageBatch batch = load_corpus(testing::corpus(), Split::kTest);
  return batch;
}

const ImageBatch& train_subset_2000() {
  static const ImageBatch batch = [] {
    const auto full = load_corpus(testing::corpus(), Split::kTrain);
    const auto idx = stratified_indices(full.labels, 200, 3);
    return subset(full, idx);
  }();
  return batch;
}

const ImageBatch& heldout_500() {
  static const ImageBatch batch = subset(test_split(), stratified_indices(test_split().labels, 50, 4));
  return batch;
}

TrainConfig quick(std::int64_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 100;
  c.learning_rate = 0.01;
  c.seed = 5;
  return c;
}

ModelSpec tiny_spec(const std::string& id) {
  auto spec = testing::small_spec(id, ModelFamily::kConvMixer);
  spec.config = ConvMixerConfig{.width = 16, .depth = 1, .patch_size = 4, .kernel_size = 3};
  spec.init_seed = 11;
  return spec;
}

}  // namespace

TEST_CASE("convmixer parameter count matches the closed form") {
  ConvMixerConfig cfg{.width = 64, .depth = 2, .patch_size = 4, .kernel_size = 3};
  const auto c = build_convmixer(cfg, 32);
  CHECK(convmixer_params(64, 2, 4, 3, 10) == 14026);
  CHECK(parameter_count(*c.network()) == 14026);
  ConvMixerConfig desk;
  CHECK(parameter_count(*build_convmixer(desk, 32).network()) == convmixer_params(128, 4, 4, 5, 10));
}

TEST_CASE("convmixer at 224 with P=16 gives N x 10") {
  ConvMixerConfig cfg{.width = 8, .depth = 1, .patch_size = 16, .kernel_size = 3};
  const auto c = build_convmixer(cfg, 224);
  // A 14 x 14 patch grid: the embedding weight has kernel P.
  const auto embed = c.network()->named_parameters()["embed.weight"];
  CHECK(embed.sizes() == torch::IntArrayRef({8, 3, 16, 16}));
  CHECK(c.logits(torch::rand({2, 3, 224, 224})).sizes() == torch::IntArrayRef({2, 10}));
}

TEST_CASE("convmixer config errors") {
  ConvMixerConfig cfg;
  cfg.patch_size = 5;
  CHECK_THROWS_AS(build_convmixer(cfg, 32), ConfigError);
  cfg.patch_size = 4;
  cfg.depth = 0;
  CHECK_THROWS_AS(build_convmixer(cfg, 32), ConfigError);
  cfg.depth = 1;
  cfg.width = 0;
  CHECK_THROWS_AS(build_convmixer(cfg, 32), ConfigError);
}

TEST_CASE("family names and table order") {
  std::vector<int> ranks;
  for (const auto f : kFamilies) {
    CHECK(parse_family(family_name(f)) == f);
    ranks.push_back(family_rank(f));
  }
  CHECK(std::is_sorted(ranks.begin(), ranks.end()));
  CHECK(family_display_name(ModelFamily::kVgg16) == "VGG16");
  CHECK_THROWS_AS(parse_family("alexnet"), ConfigError);
}

TEST_CASE("all five families give distinct N x 10 logits") {
  const auto x = torch::rand({2, 3, 32, 32});
  std::vector<torch::Tensor> outs;
  for (const auto f : kFamilies) {
    const auto c = build_baseline(f, false, 32);
    const auto z = c.logits(x);
    CHECK(z.sizes() == torch::IntArrayRef({2, 10}));
    CHECK(torch::isfinite(z).all().item<bool>());
    outs.push_back(z);
  }
  for (std::size_t i = 0; i < outs.size(); ++i) {
    for (std::size_t j = i + 1; j < outs.size(); ++j) CHECK_FALSE(torch::equal(outs[i], outs[j]));
  }
}

TEST_CASE("resnet18 at 224") {
  const auto c = build_baseline(ModelFamily::kResNet18, false, 224);
  CHECK(c.logits(torch::rand({1, 3, 224, 224})).sizes() == torch::IntArrayRef({1, 10}));
}

TEST_CASE("pretrained vit requires 224 inputs") {
  CHECK_THROWS_AS(build_baseline(ModelFamily::kVit, true, 32), ConfigError);
  auto spec = testing::small_spec("vit", ModelFamily::kVit, 224);
  spec.config = VitConfig{.patch_size = 16, .dim = 32, .depth = 1, .heads = 2, .mlp_dim = 64};
  spec.pretrained = true;
  spec.pretrained_weights = "/nonexistent/vit.pt";
  const auto c = build_classifier(spec);
  CHECK_FALSE(c.pretrained_loaded());
  CHECK_THROWS_AS(c.logits(torch::rand({1, 3, 32, 32})), DimensionError);
}

TEST_CASE("model spec json round trip") {
  auto spec = tiny_spec("m");
  spec.cipher = CipherKey{CipherAlgorithm::kFfx, 16, 99};
  spec.weights_ref = "checkpoints/m.pt";
  const nlohmann::json j = spec;
  const auto back = j.get<ModelSpec>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.cipher == spec.cipher);
  CHECK(back.classes() == 10);
}

TEST_CASE("encrypted classifier equals the plain network on encrypted input") {
  const auto plain = testing::tiny_convmixer(3);
  for (const auto a : {CipherAlgorithm::kShf, CipherAlgorithm::kNp, CipherAlgorithm::kFfx}) {
    auto spec = plain.spec();
    spec.cipher = CipherKey{a, 16, 1234};
    const Classifier enc(spec, plain.network());
    const auto b = testing::grid_batch(4, 32, 8);
    const auto e = encrypt(b, *spec.cipher);
    const auto pe = predict(enc, b);
    const auto pp = plain.logits(e.pixels);
    CHECK(torch::equal(pe.logits, pp));
    CHECK(torch::equal(pe.labels, pp.argmax(1)));
    CHECK_THROWS_AS(predict(enc, e), CipherError);
  }
}

TEST_CASE("encrypted classifier block size must tile the input") {
  auto spec = tiny_spec("m");
  spec.cipher = CipherKey{CipherAlgorithm::kShf, 12, 1};
  CHECK_THROWS_AS(build_classifier(spec), DimensionError);
}

TEST_CASE("predict is deterministic and rejects wrong shapes") {
  const auto c = testing::tiny_convmixer(4);
  const auto b = testing::grid_batch(300, 32, 1);
  const auto p1 = predict(c, b);
  const auto p2 = predict(c, b);
  CHECK(torch::equal(p1.logits, p2.logits));
  CHECK(torch::equal(p1.labels, p1.logits.argmax(1)));
  CHECK_THROWS_AS(c.logits(torch::rand({1, 3, 16, 16})), DimensionError);
  CHECK_THROWS_AS(c.logits(torch::rand({1, 1, 32, 32})), DimensionError);
}

TEST_CASE("chunked gradients equal one-shot gradients") {
  auto c = testing::tiny_convmixer(5);
  const auto n = c.chunk_size() + 7;
  const auto b = testing::grid_batch(n, 32, 2);
  const auto labels = b.labels;
  const LossFn ce = [labels](const torch::Tensor& z, std::int64_t off) {
    return advtransfer::cross_entropy_loss(z, labels.narrow(0, off, z.size(0)));
  };
  const auto g = c.loss_gradient(b.pixels, ce);
  CHECK(c.gradient_calls() == 1);
  auto x = b.pixels.clone().requires_grad_(true);
  const auto z = c.forward(x);
  const auto l = advtransfer::cross_entropy_loss(z, labels);
  l.sum().backward();
  CHECK(torch::allclose(g.grad, x.grad(), 1e-4, 1e-7));
  CHECK(torch::allclose(g.loss, l.detach(), 1e-5, 1e-6));
  CHECK(g.logits.sizes() == torch::IntArrayRef({n, 10}));
}

TEST_CASE("input gradients match central differences") {
  const auto b = testing::grid_batch(2, 32, 6);
  SUBCASE("convmixer") {
    auto c = testing::tiny_convmixer(6);
    CHECK(testing::gradient_check(c, b, 10, 1e-3, 1) <= 1e-3);
  }
  SUBCASE("vit") {
    auto spec = testing::small_spec("vit", ModelFamily::kVit);
    spec.config = VitConfig{.patch_size = 8, .dim = 32, .depth = 1, .heads = 2, .mlp_dim = 64};
    auto c = build_classifier(spec);
    CHECK(testing::gradient_check(c, b, 10, 1e-3, 2) <= 1e-3);
  }
  SUBCASE("encrypted SHF convmixer") {
    auto spec = tiny_spec("shf");
    spec.cipher = CipherKey{CipherAlgorithm::kShf, 16, 7};
    auto c = build_classifier(spec);
    CHECK(testing::gradient_check(c, b, 10, 1e-3, 3) <= 1e-3);
  }
}

TEST_CASE("accuracy bookkeeping") {
  auto spec = testing::small_spec("const", ModelFamily::kConvMixer);
  const Classifier always3(spec, std::make_shared<ConstantNet>(3));
  auto b = testing::grid_batch(20, 32, 9);
  b.labels.fill_(3);
  CHECK(accuracy(always3, b) == 100.0);
  b.labels.fill_(4);
  CHECK(accuracy(always3, b) == 0.0);
  CHECK(accuracy(always3, test_split()) == 10.0);
  ImageBatch empty;
  empty.pixels = torch::empty({0, 3, 32, 32});
  empty.labels = torch::empty({0}, torch::kInt64);
  CHECK_THROWS_AS(accuracy(always3, empty), std::invalid_argument);
}

TEST_CASE("zero epochs return the initialisation") {
  const auto spec = tiny_spec("z");
  const auto r = train(spec, testing::grid_batch(10, 32, 1), nullptr, quick(0));
  CHECK(r.history.empty());
  const auto init = build_classifier(spec);
  const auto a = r.classifier.network()->parameters();
  const auto b = init.network()->parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], b[i]));
}

TEST_CASE("tiny convmixer learns above chance") {
  auto config = quick(20);
  const auto r = train(tiny_spec("tiny"), train_subset_2000(), &heldout_500(), config);
  REQUIRE(r.history.size() == 20);
  CHECK(r.history.back().train_accuracy > 10.0);
  CHECK(r.history.back().heldout_accuracy > 10.0);
  for (std::size_t i = 0; i < r.history.size(); ++i) CHECK(r.history[i].epoch == static_cast<std::int64_t>(i + 1));
}

TEST_CASE("encrypted SHF convmixer learns above chance") {
  auto spec = tiny_spec("tiny-shf");
  spec.cipher = CipherKey{CipherAlgorithm::kShf, 16, 2024};
  const auto r = train(spec, train_subset_2000(), &heldout_500(), quick(20));
  CHECK(r.history.back().heldout_accuracy > 10.0);
  CHECK(accuracy(r.classifier, heldout_500()) == doctest::Approx(r.history.back().heldout_accuracy));
}

TEST_CASE("training is deterministic") {
  auto config = quick(2);
  config.augment = true;
  config.cutout = 8;
  config.mixup_alpha = 0.2;
  const auto data = subset(train_subset_2000(), std::vector<std::int64_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9,
                                                                            10, 11, 12, 13, 14, 15});
  const auto a = train(tiny_spec("d"), data, nullptr, config);
  const auto b = train(tiny_spec("d"), data, nullptr, config);
  const auto probe = testing::grid_batch(8, 32, 3);
  CHECK(torch::equal(a.classifier.logits(probe.pixels), b.classifier.logits(probe.pixels)));
  CHECK(a.history[1].train_loss == b.history[1].train_loss);
  auto plain = config;
  plain.mixup_alpha = 0.0;
  const auto c = train(tiny_spec("d"), data, nullptr, plain);
  CHECK_FALSE(torch::equal(a.classifier.logits(probe.pixels), c.classifier.logits(probe.pixels)));
}

TEST_CASE("divergence aborts with a diagnostic") {
  auto config = quick(3);
  config.learning_rate = 1e30;
  try {
    train(tiny_spec("boom"), testing::grid_batch(64, 32, 4), nullptr, config);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("boom") != std::string::npos);
  }
}

TEST_CASE("train rejects encrypted input") {
  const auto e = encrypt(testing::grid_batch(4, 32, 1), CipherKey{CipherAlgorithm::kNp, 16, 3});
  CHECK_THROWS_AS(train(tiny_spec("x"), e, nullptr, quick(1)), CipherError);
}

TEST_CASE("checkpoint round trip reproduces logits") {
  testing::TempDir dir("ckpt");
  auto spec = tiny_spec("ck");
  spec.cipher = CipherKey{CipherAlgorithm::kFfx, 16, 77};
  const auto r = train(spec, testing::grid_batch(32, 32, 5), nullptr, quick(1));
  const auto path = dir.path() / "sub" / "ck.pt";
  save_checkpoint(path, r.classifier, {{"note", "x"}});
  const auto back = load_checkpoint(path);
  const auto probe = testing::grid_batch(6, 32, 6);
  CHECK(torch::equal(back.logits(probe.pixels), r.classifier.logits(probe.pixels)));
  CHECK(back.spec().cipher == spec.cipher);
  const auto manifest = read_checkpoint_manifest(path);
  CHECK(manifest.at("extra").at("note") == "x");
  CHECK(manifest.at("spec").at("id") == "ck");
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "absent.pt"), StoreError);
}

TEST_CASE("train config json validation") {
  TrainConfig c;
  nlohmann::json j = c;
  CHECK(j.get<TrainConfig>().epochs == c.epochs);
  c.cutout = 8;
  c.mixup_alpha = 0.2;
  j = c;
  CHECK(j.get<TrainConfig>().cutout == 8);
  CHECK(j.get<TrainConfig>().mixup_alpha == 0.2);
  j["epochs"] = -1;
  CHECK_THROWS_AS(j.get<TrainConfig>(), ConfigError);
  j = c;
  j["cutout"] = -2;
  CHECK_THROWS_AS(j.get<TrainConfig>(), ConfigError);
  CHECK(config_hash(nlohmann::json{{"a", 1}}) == config_hash(nlohmann::json{{"a", 1}}));
  CHECK(config_hash(nlohmann::json{{"a", 1}}) != config_hash(nlohmann::json{{"a", 2}}));
}
