#include <algorithm>
#include <cmath>
#include <limits>

#include "advtransfer/attacks.hpp"
#include "advtransfer/errors.hpp"
#include "advtransfer/prng.hpp"
#include "attack_internal.hpp"

namespace advtransfer {

std::vector<std::int64_t> apgd_checkpoints(std::int64_t iterations) {
  std::vector<double> p = {0.0, 0.22};
  while (p.back() < 1.0) {
    const auto n = p.size();
    p.push_back(p[n - 1] + std::max(p[n - 1] - p[n - 2] - 0.03, 0.06));
  }
  std::vector<std::int64_t> out;
  for (std::size_t j = 1; j < p.size(); ++j) {
    const auto w = static_cast<std::int64_t>(std::ceil(p[j] * static_cast<double>(iterations) - 1e-9));
    if (w > 0 && w < iterations && (out.empty() || w > out.back())) out.push_back(w);
  }
  return out;
}

namespace {

using torch::Tensor;

struct Ascent {
  Tensor x_best;
  Tensor loss_best;
  Tensor aborted;
};

Tensor random_start(const Tensor& x, double eps, Xoshiro256& rng) {
  auto t = torch::empty_like(x);
  auto* p = t.data_ptr<float>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<float>(2.0 * rng.uniform() - 1.0);
  const auto scale = t.abs().flatten(1).amax(1).clamp_min(1e-12).view({-1, 1, 1, 1});
  return detail::project_ball(x + eps * t / scale, x, eps);
}

// One APGD run from `start`; the whole batch moves in lock-step with
// per-example step sizes.
Ascent ascend(Classifier& model, const Tensor& x, const Tensor& start, const LossFn& loss,
              const AttackBudget& b, std::vector<Tensor>* trace) {
  const auto n = x.size(0);
  const auto view = std::vector<std::int64_t>{-1, 1, 1, 1};
  const auto eps = b.epsilon;
  auto step = torch::full({n}, 2.0 * eps, torch::kFloat32);

  auto x_adv = start.clone();
  auto g0 = model.loss_gradient(x_adv, loss);
  auto aborted = detail::finite_rows(g0.loss, g0.grad).logical_not();
  auto grad = torch::where(aborted.view(view), torch::zeros_like(g0.grad), g0.grad);
  auto loss_prev = torch::where(aborted, torch::full_like(g0.loss, -INFINITY), g0.loss);

  auto x_best = x_adv.clone();
  auto grad_best = grad.clone();
  auto loss_best = loss_prev.clone();
  if (trace) trace->push_back(loss_best.clone());

  auto reduced_last = torch::ones({n}, torch::kBool);
  auto loss_best_last = loss_best.clone();
  auto improvements = torch::zeros({n}, torch::kInt64);

  const auto checkpoints = apgd_checkpoints(b.max_iterations);
  std::size_t next_ckpt = 0;
  std::int64_t last_ckpt = 0;
  auto x_old = x_adv.clone();

  for (std::int64_t k = 0; k < b.max_iterations; ++k) {
    {
      torch::NoGradGuard no_grad;
      const auto s = step.view(view);
      auto z = detail::project_ball(x_adv + s * grad.sign(), x, eps);
      if (k > 0) {
        const double a = b.momentum;
        z = detail::project_ball(x_adv + a * (z - x_adv) + (1.0 - a) * (x_adv - x_old), x, eps);
      }
      x_old = x_adv;
      x_adv = torch::where(aborted.view(view), x, z);
    }

    auto g = model.loss_gradient(x_adv, loss);
    const auto bad = detail::finite_rows(g.loss, g.grad).logical_not() & aborted.logical_not();
    aborted = aborted | bad;
    grad = torch::where(aborted.view(view), torch::zeros_like(g.grad), g.grad);
    const auto cur = torch::where(aborted, torch::full_like(g.loss, -INFINITY), g.loss);

    improvements += (cur > loss_prev).to(torch::kInt64);
    loss_prev = cur;

    const auto better = cur > loss_best;
    x_best = torch::where(better.view(view), x_adv, x_best);
    grad_best = torch::where(better.view(view), grad, grad_best);
    loss_best = torch::where(better, cur, loss_best);
    if (trace) trace->push_back(loss_best.clone());

    const auto it = k + 1;
    if (next_ckpt < checkpoints.size() && it == checkpoints[next_ckpt]) {
      const double window = static_cast<double>(it - last_ckpt);
      const auto stalled = improvements.to(torch::kDouble) < b.rho * window;
      const auto flat = reduced_last.logical_not() & (loss_best_last >= loss_best);
      const auto reduce = (stalled | flat) & aborted.logical_not();
      step = torch::where(reduce, step / 2.0, step);
      x_adv = torch::where(reduce.view(view), x_best, x_adv);
      grad = torch::where(reduce.view(view), grad_best, grad);
      reduced_last = reduce;
      loss_best_last = loss_best.clone();
      improvements.zero_();
      last_ckpt = it;
      ++next_ckpt;
    }
  }
  x_best = torch::where(aborted.view(view), x, x_best);
  return {x_best, loss_best, aborted};
}

Ascent ascend_with_restarts(Classifier& model, const Tensor& x, const LossFn& loss,
                            const AttackBudget& b, std::vector<Tensor>* trace) {
  Xoshiro256 rng(b.seed);
  Ascent best;
  for (std::int64_t r = 0; r < b.restarts; ++r) {
    const auto start = (b.random_start || r > 0) ? random_start(x, b.epsilon, rng) : x.clone();
    auto run = ascend(model, x, start, loss, b, r == 0 ? trace : nullptr);
    if (r == 0) {
      best = std::move(run);
      continue;
    }
    const auto take = run.loss_best > best.loss_best;
    best.x_best = torch::where(take.view({-1, 1, 1, 1}), run.x_best, best.x_best);
    best.loss_best = torch::where(take, run.loss_best, best.loss_best);
    best.aborted = best.aborted & run.aborted;
  }
  return best;
}

void check_batch(const ImageBatch& batch) {
  batch.validate();
  if (batch.encrypted_with) {
    throw CipherError("attacks take plain images; the model applies its own cipher");
  }
}

}  // namespace

AttackResult apgd(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                  const LossFn& loss, ApgdTrace* trace) {
  budget.validate();
  check_batch(batch);
  const auto& x = batch.pixels;
  std::vector<Tensor> rows;
  auto run = ascend_with_restarts(model, x, loss, budget, trace ? &rows : nullptr);
  if (trace) trace->best_loss = rows.empty() ? Tensor() : torch::stack(rows);
  const auto pred = model.logits(run.x_best).argmax(1);
  auto iters = torch::full({batch.size()}, budget.max_iterations * budget.restarts, torch::kInt64);
  return detail::finish(batch, run.x_best, pred, iters, run.aborted);
}

AttackResult apgd_ce(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                     ApgdTrace* trace) {
  const auto labels = batch.labels;
  const LossFn ce = [labels](const Tensor& logits, std::int64_t offset) {
    return advtransfer::cross_entropy_loss(logits, labels.narrow(0, offset, logits.size(0)));
  };
  return apgd(model, batch, budget, ce, trace);
}

AttackResult apgd_t(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                    std::int64_t n_target_classes) {
  budget.validate();
  check_batch(batch);
  const auto n = batch.size();
  const auto view = std::vector<std::int64_t>{-1, 1, 1, 1};
  const auto& x = batch.pixels;
  const auto clean = model.logits(x);
  const auto order = clean.argsort(1, /*descending=*/true);
  const auto k = std::clamp<std::int64_t>(n_target_classes, 1, model.classes() - 1);

  auto adv = x.clone();
  auto best_loss = torch::full({n}, -INFINITY, torch::kFloat32);
  auto fooled = clean.argmax(1).ne(batch.labels);
  auto aborted = torch::zeros({n}, torch::kBool);
  auto iters = torch::zeros({n}, torch::kInt64);

  for (std::int64_t t = 1; t <= k; ++t) {
    const auto rows = fooled.logical_not().nonzero().flatten();
    if (rows.numel() == 0) break;
    const auto xs = x.index_select(0, rows);
    const auto labels = batch.labels.index_select(0, rows);
    const auto targets = order.index_select(0, rows).select(1, t).contiguous();
    const LossFn dlr = [labels, targets](const Tensor& logits, std::int64_t offset) {
      const auto m = logits.size(0);
      return targeted_dlr_loss(logits, labels.narrow(0, offset, m), targets.narrow(0, offset, m));
    };
    auto run = ascend_with_restarts(model, xs, dlr, budget, nullptr);
    const auto success = model.logits(run.x_best).argmax(1).ne(labels) & run.aborted.logical_not();
    const auto take = success | (run.loss_best > best_loss.index_select(0, rows));
    const auto cur = adv.index_select(0, rows);
    adv.index_copy_(0, rows, torch::where(take.view(view), run.x_best, cur));
    best_loss.index_copy_(0, rows, torch::where(take, run.loss_best, best_loss.index_select(0, rows)));
    fooled.index_copy_(0, rows, success);
    aborted.index_copy_(0, rows, aborted.index_select(0, rows) | run.aborted);
    iters.index_add_(0, rows, torch::full({rows.numel()}, budget.max_iterations * budget.restarts,
                                          torch::kInt64));
  }
  const auto pred = model.logits(adv).argmax(1);
  aborted = aborted & pred.eq(batch.labels);
  return detail::finish(batch, adv, pred, iters, aborted);
}

}  // namespace advtransfer
