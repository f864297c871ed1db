#include "doctest_torch.hpp"

#include <fstream>
#include <limits>
#include <sstream>

#include "advtransfer/attacks.hpp"
#include "advtransfer/errors.hpp"
#include "test_support.hpp"

using namespace advtransfer;

namespace {

constexpr double kEps = 8.0 / 255.0;

AttackBudget small_budget(std::int64_t iterations = 10, std::int64_t queries = 200) {
  AttackBudget b;
  b.epsilon = kEps;
  b.max_iterations = iterations;
  b.max_queries = queries;
  b.n_target_classes = 3;
  b.seed = 17;
  return b;
}

// Pixels kept away from 0 and 1 so the box never clips an eps step.
ImageBatch interior_batch(std::int64_t n, std::int64_t side, std::uint64_t seed) {
  auto b = testing::grid_batch(n, side, seed);
  b.pixels = 0.1f + 0.8f * b.pixels;
  return b;
}

void check_ball(const AttackResult& r, const ImageBatch& clean, double eps) {
  const auto diff = (r.adversarial.pixels - clean.pixels).abs().max().item<double>();
  CHECK(diff <= eps + 1e-6);
  CHECK(r.adversarial.pixels.min().item<float>() >= 0.0f);
  CHECK(r.adversarial.pixels.max().item<float>() <= 1.0f);
  CHECK(r.adversarial.pixels.sizes() == clean.pixels.sizes());
  CHECK(torch::equal(r.adversarial.labels, clean.labels));
  CHECK(r.success.size(0) == clean.size());
  CHECK(r.iterations.size(0) == clean.size());
  CHECK(torch::allclose(r.linf, (r.adversarial.pixels - clean.pixels).abs().flatten(1).amax(1)));
}

// Smallest r with sum |w_i| min(r, bound_i) >= |c|, by bisection.
double bisect_radius(const std::vector<double>& w, double c, const std::vector<double>& lo,
                     const std::vector<double>& hi) {
  const auto reach = [&](double r) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double wi = c >= 0 ? w[i] : -w[i];
      const double bound = wi > 0 ? hi[i] : -lo[i];
      s += std::abs(wi) * std::min(r, bound);
    }
    return s;
  };
  double a = 0.0, b = 2.0;
  if (reach(b) < std::abs(c)) return std::numeric_limits<double>::infinity();
  for (int i = 0; i < 200; ++i) {
    const double m = 0.5 * (a + b);
    (reach(m) >= std::abs(c) ? b : a) = m;
  }
  return b;
}

}  // namespace

TEST_CASE("attack names and kinds") {
  for (const auto k : kAllAttacks) CHECK(parse_attack(attack_name(k)) == k);
  CHECK(attack_name(AttackKind::kApgdCe) == "APGD-ce");
  CHECK(attack_is_targeted(AttackKind::kFabT));
  CHECK_FALSE(attack_is_targeted(AttackKind::kSquare));
  CHECK_FALSE(attack_is_white_box(AttackKind::kSquare));
  CHECK(attack_is_white_box(AttackKind::kApgdT));
  CHECK_THROWS(parse_attack("cw"));
}

TEST_CASE("budget validation and json") {
  AttackBudget b;
  b.validate();
  nlohmann::json j = b;
  CHECK(j.at("norm") == "Linf");
  CHECK(j.get<AttackBudget>().epsilon == b.epsilon);
  j["norm"] = "L2";
  CHECK_THROWS_AS(j.get<AttackBudget>(), ConfigError);
  b.epsilon = -0.1;
  CHECK_THROWS_AS(b.validate(), ConfigError);
  b.epsilon = kEps;
  b.max_queries = 0;
  CHECK_THROWS_AS(b.validate(), ConfigError);
}

TEST_CASE("apgd checkpoints") {
  CHECK((apgd_checkpoints(100) == std::vector<std::int64_t>{22, 41, 57, 70, 80, 87, 93, 99}));
  CHECK(apgd_checkpoints(1).empty());
  const auto c = apgd_checkpoints(1000);
  CHECK(std::is_sorted(c.begin(), c.end()));
  CHECK(c.front() == 220);
}

TEST_CASE("losses") {
  const auto z = torch::tensor({{2.0f, 1.0f, 0.5f, 0.0f, -1.0f}});
  const auto y = torch::tensor({0}, torch::kInt64);
  const auto t = torch::tensor({1}, torch::kInt64);
  const double lse = std::log(std::exp(2.0) + std::exp(1.0) + std::exp(0.5) + 1.0 + std::exp(-1.0));
  CHECK(advtransfer::cross_entropy_loss(z, y).item<double>() == doctest::Approx(lse - 2.0));
  // -(z_y - z_t) / (z_pi1 - (z_pi3 + z_pi4) / 2)
  CHECK(targeted_dlr_loss(z, y, t).item<double>() == doctest::Approx(-(2.0 - 1.0) / (2.0 - 0.25)));
  CHECK(margin_loss(z, y).item<double>() == doctest::Approx(1.0));
  const auto two = torch::tensor({{0.3f, 0.9f}});
  CHECK(targeted_dlr_loss(two, y, t).item<double>() == doctest::Approx(0.6));
}

TEST_CASE("one APGD step on a linear model is the fast-gradient step") {
  auto model = testing::linear_classifier(8, 10, 3);
  const auto batch = interior_batch(6, 8, 4);
  auto b = small_budget(1);
  const auto r = apgd_ce(model, batch, b);
  // Analytic input gradient of cross-entropy for z = W x + c.
  const auto w = std::static_pointer_cast<testing::LinearNet>(model.network())->fc->weight.detach();
  const auto p = torch::softmax(model.logits(batch.pixels), 1);
  const auto onehot = torch::one_hot(batch.labels, 10).to(torch::kFloat32);
  const auto g = (p - onehot).matmul(w).view_as(batch.pixels);
  const auto want = batch.pixels + kEps * g.sign();
  CHECK(torch::allclose(r.adversarial.pixels, want, 0.0, 1e-6));
  CHECK(model.gradient_calls() == 2);
}

TEST_CASE("epsilon zero returns the input and only clean errors succeed") {
  auto model = testing::tiny_convmixer(2);
  const auto batch = testing::grid_batch(12, 32, 5);
  auto b = small_budget(5, 50);
  b.epsilon = 0.0;
  const auto clean_wrong = model.logits(batch.pixels).argmax(1).ne(batch.labels);
  for (const auto k : kAllAttacks) {
    const auto r = run_attack(model, k, batch, b);
    CHECK(torch::equal(r.adversarial.pixels, batch.pixels));
    CHECK(torch::equal(r.success, clean_wrong));
  }
}

TEST_CASE("apgd best loss is monotone") {
  auto model = testing::tiny_convmixer(3);
  const auto batch = testing::grid_batch(8, 32, 6);
  ApgdTrace trace;
  const auto r = apgd_ce(model, batch, small_budget(30), &trace);
  REQUIRE(trace.best_loss.size(0) == 31);
  CHECK((trace.best_loss.diff(1, 0) >= 0).all().item<bool>());
  // The returned point carries the best loss.
  const auto final_loss = advtransfer::cross_entropy_loss(model.logits(r.adversarial.pixels), batch.labels);
  CHECK(torch::allclose(final_loss, trace.best_loss[30], 1e-4, 1e-5));
}

TEST_CASE("every attack stays in the eps ball and the box") {
  auto model = testing::tiny_convmixer(4);
  const auto batch = testing::grid_batch(10, 32, 7);
  const auto b = small_budget(8, 100);
  for (const auto k : kAllAttacks) {
    const auto r = run_attack(model, k, batch, b);
    check_ball(r, batch, kEps);
    const auto pred = model.logits(r.adversarial.pixels).argmax(1);
    CHECK(torch::equal(r.success, pred.ne(batch.labels) & r.aborted.logical_not()));
  }
}

TEST_CASE("apgd with random restarts stays in the ball") {
  auto model = testing::tiny_convmixer(5);
  const auto batch = testing::grid_batch(6, 32, 8);
  auto b = small_budget(5);
  b.restarts = 3;
  b.random_start = true;
  check_ball(apgd_ce(model, batch, b), batch, kEps);
  check_ball(apgd_t(model, batch, b, 2), batch, kEps);
}

TEST_CASE("square never touches gradients and respects the query limit") {
  auto model = testing::tiny_convmixer(6);
  const auto batch = testing::grid_batch(10, 32, 9);
  const auto b = small_budget(1, 150);
  const auto r = square_attack(static_cast<const Classifier&>(model), batch, b);
  CHECK(model.gradient_calls() == 0);
  CHECK((r.iterations <= 150).all().item<bool>());
  CHECK((r.iterations >= 1).all().item<bool>());
  const auto clean_wrong = model.logits(batch.pixels).argmax(1).ne(batch.labels);
  CHECK(r.success.sum().item<std::int64_t>() >= clean_wrong.sum().item<std::int64_t>());
  const auto pred = model.logits(r.adversarial.pixels).argmax(1);
  CHECK(torch::equal(r.success, pred.ne(batch.labels)));
  // Clean errors stop after the initial query.
  CHECK((r.iterations.masked_select(clean_wrong) == 1).all().item<bool>());
}

TEST_CASE("square counts its queries through the score function") {
  auto model = testing::tiny_convmixer(7);
  const auto batch = testing::grid_batch(4, 32, 10);
  std::int64_t rows = 0;
  const ScoreFn scores = [&](const torch::Tensor& x) {
    rows += x.size(0);
    return model.logits(x);
  };
  const auto r = square_attack(scores, batch, small_budget(1, 60));
  CHECK(rows == r.iterations.sum().item<std::int64_t>());
}

TEST_CASE("square schedule shrinks") {
  const auto s = square_schedule_sides(5000, 0.8, 32);
  REQUIRE(s.size() == 4999);
  CHECK(s.front() == 29);
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i] <= s[i - 1]);
  CHECK(s.back() >= 1);
}

TEST_CASE("apgd and square are deterministic under a fixed seed") {
  auto model = testing::tiny_convmixer(8);
  auto batch = testing::grid_batch(6, 32, 11);
  batch.labels = model.logits(batch.pixels).argmax(1);
  auto b = small_budget(6, 80);
  b.restarts = 2;
  CHECK(torch::equal(apgd_ce(model, batch, b).adversarial.pixels,
                     apgd_ce(model, batch, b).adversarial.pixels));
  CHECK(torch::equal(square_attack(model, batch, b).adversarial.pixels,
                     square_attack(model, batch, b).adversarial.pixels));
  auto other = b;
  other.seed = b.seed + 1;
  CHECK_FALSE(torch::equal(square_attack(model, batch, b).adversarial.pixels,
                           square_attack(model, batch, other).adversarial.pixels));
}

TEST_CASE("apgd-t on two classes iterates one target") {
  auto model = testing::linear_classifier(8, 2, 9);
  const auto batch = interior_batch(6, 8, 12);
  const auto clean_ok = model.logits(batch.pixels).argmax(1).eq(batch.labels);
  auto b = small_budget(4);
  const auto r = apgd_t(model, batch, b, 9);
  const auto expect = clean_ok.to(torch::kInt64) * 4;
  CHECK(torch::equal(r.iterations, expect));
  check_ball(r, batch, kEps);
}

TEST_CASE("fab-t leaves clean errors untouched") {
  auto model = testing::tiny_convmixer(10);
  auto batch = testing::grid_batch(10, 32, 13);
  const auto pred = model.logits(batch.pixels).argmax(1);
  // Half the labels disagree with the model.
  batch.labels = pred.clone();
  for (std::int64_t i = 0; i < 10; i += 2) batch.labels[i] = (pred[i].item<std::int64_t>() + 1) % 10;
  const auto r = fab_t(model, batch, small_budget(10), 3);
  for (std::int64_t i = 0; i < 10; i += 2) {
    CHECK(torch::equal(r.adversarial.pixels[i], batch.pixels[i]));
    CHECK(r.success[i].item<bool>());
    CHECK(r.iterations[i].item<std::int64_t>() == 0);
  }
  check_ball(r, batch, kEps);
  // Failures come back unperturbed.
  for (std::int64_t i = 1; i < 10; i += 2) {
    if (!r.success[i].item<bool>()) CHECK(torch::equal(r.adversarial.pixels[i], batch.pixels[i]));
  }
}

TEST_CASE("fab-t finds the boundary of a linear model") {
  auto model = testing::linear_classifier(4, 10, 21);
  const auto batch = interior_batch(8, 4, 14);
  auto b = small_budget(20);
  b.epsilon = 0.5;
  const auto r = fab_t(model, batch, b, 9);
  check_ball(r, batch, 0.5);
  // Oracle: smallest l-inf step inside the box that reaches any other class.
  const auto* lin = dynamic_cast<testing::LinearNet*>(model.network().get());
  REQUIRE(lin != nullptr);
  const auto weight = lin->fc->weight.detach().to(torch::kDouble);
  const auto logits = model.logits(batch.pixels).to(torch::kDouble);
  std::int64_t reachable = 0;
  for (std::int64_t i = 0; i < batch.size(); ++i) {
    const auto y = batch.labels[i].item<std::int64_t>();
    if (logits[i].argmax().item<std::int64_t>() != y) continue;
    const auto x = batch.pixels[i].flatten().to(torch::kDouble);
    std::vector<double> lo(x.numel()), hi(x.numel());
    for (std::int64_t k = 0; k < x.numel(); ++k) {
      lo[k] = -x[k].item<double>();
      hi[k] = 1.0 - x[k].item<double>();
    }
    double dist = std::numeric_limits<double>::infinity();
    for (std::int64_t t = 0; t < 10; ++t) {
      if (t == y) continue;
      const auto wt = (weight[t] - weight[y]).contiguous();
      const std::vector<double> w(wt.data_ptr<double>(), wt.data_ptr<double>() + wt.numel());
      const double c = logits[i][y].item<double>() - logits[i][t].item<double>();
      dist = std::min(dist, bisect_radius(w, c, lo, hi));
    }
    if (r.success[i].item<bool>()) CHECK(r.linf[i].item<double>() >= dist - 1e-4);
    if (dist <= 0.45) {
      ++reachable;
      CHECK(r.success[i].item<bool>());
    }
  }
  CHECK(reachable > 0);
}

TEST_CASE("hyperplane projection matches a bisection oracle") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0), box(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const int dim = 1 + static_cast<int>(rng() % 12);
    std::vector<double> w(dim), lo(dim), hi(dim);
    for (int i = 0; i < dim; ++i) {
      w[i] = (rng() % 7 == 0) ? 0.0 : u(rng);
      lo[i] = -box(rng);
      hi[i] = box(rng);
    }
    const double c = 2.0 * u(rng);
    const auto to_t = [](const std::vector<double>& v) {
      return torch::tensor(std::vector<float>(v.begin(), v.end()));
    };
    const auto d = project_linf_hyperplane(to_t(w), c, to_t(lo), to_t(hi));
    std::vector<float> wf(w.begin(), w.end()), lof(lo.begin(), lo.end()), hif(hi.begin(), hi.end());
    const double r = bisect_radius(std::vector<double>(wf.begin(), wf.end()), c,
                                   std::vector<double>(lof.begin(), lof.end()),
                                   std::vector<double>(hif.begin(), hif.end()));
    for (int i = 0; i < dim; ++i) {
      CHECK(d[i].item<float>() >= lof[i] - 1e-6f);
      CHECK(d[i].item<float>() <= hif[i] + 1e-6f);
    }
    if (std::isfinite(r)) {
      double dot = 0.0;
      for (int i = 0; i < dim; ++i) dot += wf[i] * d[i].item<double>();
      CHECK(dot == doctest::Approx(c).epsilon(1e-4).scale(1.0));
      CHECK(d.abs().max().item<double>() == doctest::Approx(r).epsilon(1e-4).scale(1.0));
    } else {
      // Unreachable: every coordinate saturates in the direction of c.
      for (int i = 0; i < dim; ++i) {
        const double wi = c >= 0 ? wf[i] : -wf[i];
        const double want = wi > 0 ? hif[i] : (wi < 0 ? lof[i] : 0.0);
        CHECK(d[i].item<float>() == doctest::Approx(want).epsilon(1e-6));
      }
    }
  }
}

namespace {

// Throws on every query.
class Exploding : public ImageNetwork {
 public:
  explicit Exploding(int* budget) : budget_(budget) {}
  torch::Tensor forward(torch::Tensor x) override {
    if ((*budget_)-- <= 0) throw std::runtime_error("exploded");
    return torch::zeros({x.size(0), 10}) + x.flatten(1).sum(1, true);
  }

 private:
  int* budget_;
};

}  // namespace

TEST_CASE("suite runs four independent attacks and isolates failures") {
  auto model = testing::tiny_convmixer(11);
  const auto batch = testing::grid_batch(5, 32, 15);
  const auto suite = run_attack_suite(model, batch, small_budget(4, 40));
  REQUIRE(suite.size() == 4);
  for (const auto& [kind, entry] : suite) {
    REQUIRE(entry.result.has_value());
    CHECK(entry.error.empty());
    check_ball(*entry.result, batch, kEps);
    // Same as a standalone run: the attacks do not feed each other.
    CHECK(torch::equal(entry.result->adversarial.pixels,
                       run_attack(model, kind, batch, small_budget(4, 40)).adversarial.pixels));
  }

  int calls = 3;
  Classifier fragile(testing::small_spec("fragile", ModelFamily::kConvMixer),
                     std::make_shared<Exploding>(&calls));
  const auto broken = run_attack_suite(fragile, batch, small_budget(4, 40));
  REQUIRE(broken.size() == 4);
  int failed = 0;
  for (const auto& [kind, entry] : broken) {
    if (!entry.result) {
      ++failed;
      CHECK(entry.error.find("exploded") != std::string::npos);
    }
  }
  CHECK(failed >= 3);
}

TEST_CASE("npy and ledger round trip") {
  testing::TempDir dir("npy");
  const auto t = torch::rand({3, 3, 4, 4});
  save_npy(dir.path() / "a.npy", t);
  CHECK(torch::equal(load_npy(dir.path() / "a.npy"), t));
  {
    std::ifstream in(dir.path() / "a.npy", std::ios::binary);
    std::string magic(6, '\0');
    in.read(magic.data(), 6);
    CHECK(magic == "\x93NUMPY");
  }
  auto model = testing::tiny_convmixer(12);
  const auto batch = testing::grid_batch(3, 32, 16);
  const auto r = apgd_ce(model, batch, small_budget(2));
  save_attack_result(dir.path() / "r.npy", dir.path() / "r.csv", r, "config_hash=abc");
  CHECK(torch::equal(load_npy(dir.path() / "r.npy"), r.adversarial.pixels));
  std::ifstream in(dir.path() / "r.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "# config_hash=abc");
  std::getline(in, line);
  CHECK(line == "index,source_index,label,success,iterations,linf");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
  CHECK_THROWS(load_npy(dir.path() / "absent.npy"));
}

TEST_CASE("attacks reject encrypted batches") {
  auto model = testing::tiny_convmixer(13);
  const auto e = encrypt(testing::grid_batch(2, 32, 17), CipherKey{CipherAlgorithm::kShf, 16, 3});
  CHECK_THROWS_AS(apgd_ce(model, e, small_budget(2)), CipherError);
  CHECK_THROWS_AS(fab_t(model, e, small_budget(2), 2), CipherError);
}

TEST_CASE("attacks differentiate through an encrypted model") {
  auto base = testing::tiny_convmixer(14);
  for (const auto a : {CipherAlgorithm::kShf, CipherAlgorithm::kNp, CipherAlgorithm::kFfx}) {
    auto spec = base.spec();
    spec.cipher = CipherKey{a, 16, 99};
    Classifier enc(spec, base.network());
    const auto batch = testing::grid_batch(6, 32, 18);
    const auto r = apgd_ce(enc, batch, small_budget(5));
    check_ball(r, batch, kEps);
    CHECK(r.linf.max().item<float>() > 0.0f);
  }
}
