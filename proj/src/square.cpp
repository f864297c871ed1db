#include <algorithm>
#include <cmath>

#include "advtransfer/attacks.hpp"
#include "advtransfer/errors.hpp"
#include "advtransfer/prng.hpp"
#include "attack_internal.hpp"

namespace advtransfer {

namespace {

using torch::Tensor;

double p_selection(double p_init, std::int64_t it, std::int64_t max_queries) {
  const auto t = static_cast<std::int64_t>(static_cast<double>(it) / static_cast<double>(max_queries) * 10000.0);
  if (t <= 10) return p_init;
  if (t <= 50) return p_init / 2;
  if (t <= 200) return p_init / 4;
  if (t <= 500) return p_init / 8;
  if (t <= 1000) return p_init / 16;
  if (t <= 2000) return p_init / 32;
  if (t <= 4000) return p_init / 64;
  if (t <= 6000) return p_init / 128;
  if (t <= 8000) return p_init / 256;
  return p_init / 512;
}

}  // namespace

std::vector<std::int64_t> square_schedule_sides(std::int64_t max_queries, double p_init,
                                                std::int64_t side) {
  std::vector<std::int64_t> sides;
  sides.reserve(static_cast<std::size_t>(std::max<std::int64_t>(max_queries - 1, 0)));
  for (std::int64_t it = 0; it + 1 < max_queries; ++it) {
    const double p = p_selection(p_init, it, max_queries);
    auto s = static_cast<std::int64_t>(std::llround(std::sqrt(p * static_cast<double>(side * side))));
    sides.push_back(std::clamp<std::int64_t>(s, 1, side - 1));
  }
  return sides;
}

AttackResult square_attack(const ScoreFn& scores, const ImageBatch& batch,
                           const AttackBudget& budget) {
  budget.validate();
  batch.validate();
  if (batch.encrypted_with) {
    throw CipherError("attacks take plain images; the model applies its own cipher");
  }
  const auto n = batch.size();
  const auto& x = batch.pixels;
  const auto c = x.size(1);
  const auto h = x.size(2);
  const auto w = x.size(3);
  if (h < 2 || w < 2) throw DimensionError("Square needs images of side >= 2");
  const auto eps = static_cast<float>(budget.epsilon);
  Xoshiro256 rng(budget.seed);

  // Clean errors keep x; everything else starts from vertical stripes.
  auto best = x.clone();
  auto best_scores = scores(x);
  auto margin = margin_loss(best_scores, batch.labels);
  auto queries = torch::ones({n}, torch::kInt64);

  const auto sides = square_schedule_sides(budget.max_queries, budget.square_p_init, std::min(h, w));
  const auto correct = margin.gt(0.0).nonzero().flatten();
  if (budget.max_queries >= 2 && correct.numel() > 0) {
    const auto m = correct.numel();
    auto stripes = torch::empty({m, c, 1, w}, torch::kFloat32);
    auto* sp = stripes.data_ptr<float>();
    for (std::int64_t i = 0; i < stripes.numel(); ++i) sp[i] = rng.coin() ? eps : -eps;
    const auto xc = x.index_select(0, correct);
    const auto init = detail::project_ball((xc + stripes).clamp(0.0, 1.0), xc, budget.epsilon);
    const auto init_scores = scores(init);
    best.index_copy_(0, correct, init);
    best_scores.index_copy_(0, correct, init_scores);
    margin.index_copy_(0, correct, margin_loss(init_scores, batch.labels.index_select(0, correct)));
    queries.index_add_(0, correct, torch::ones({m}, torch::kInt64));
  }

  for (std::size_t it = 1; it < sides.size(); ++it) {
    const auto s = sides[it];
    const auto active = margin.gt(0.0).nonzero().flatten();
    const auto m = active.numel();
    if (m == 0) break;
    const auto xa = x.index_select(0, active);
    const auto ba = best.index_select(0, active).contiguous();
    auto cand = ba.clone();
    auto* cp = cand.data_ptr<float>();
    const auto* xp = xa.data_ptr<float>();
    const auto* bp = ba.data_ptr<float>();
    for (std::int64_t e = 0; e < m; ++e) {
      const auto vh = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - s + 1)));
      const auto vw = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - s + 1)));
      for (int attempt = 0; attempt < 10; ++attempt) {
        bool changed = false;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const float delta = rng.coin() ? 2.0f * eps : -2.0f * eps;
          for (std::int64_t r = vh; r < vh + s; ++r) {
            for (std::int64_t q = vw; q < vw + s; ++q) {
              const auto idx = ((e * c + ch) * h + r) * w + q;
              const float v = std::clamp(std::clamp(bp[idx] + delta, xp[idx] - eps, xp[idx] + eps), 0.0f, 1.0f);
              changed = changed || std::abs(v - bp[idx]) > 1e-7f;
              cp[idx] = v;
            }
          }
        }
        if (changed) break;
      }
    }
    const auto cand_scores = scores(cand);
    const auto cand_margin = margin_loss(cand_scores, batch.labels.index_select(0, active));
    const auto improved = cand_margin < margin.index_select(0, active);
    best_scores.index_copy_(0, active, torch::where(improved.view({-1, 1}), cand_scores,
                                                    best_scores.index_select(0, active)));
    best.index_copy_(0, active, torch::where(improved.view({-1, 1, 1, 1}), cand, ba));
    margin.index_copy_(0, active, torch::where(improved, cand_margin, margin.index_select(0, active)));
    queries.index_add_(0, active, torch::ones({m}, torch::kInt64));
  }
  const auto pred = best_scores.argmax(1);
  return detail::finish(batch, best, pred, queries, torch::zeros({n}, torch::kBool));
}

AttackResult square_attack(const Classifier& model, const ImageBatch& batch,
                           const AttackBudget& budget) {
  const ScoreFn scores = [&model](const Tensor& pixels) { return model.logits(pixels); };
  return square_attack(scores, batch, budget);
}

}  // namespace advtransfer
