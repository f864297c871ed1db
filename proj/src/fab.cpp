#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "advtransfer/attacks.hpp"
#include "advtransfer/errors.hpp"
#include "attack_internal.hpp"

namespace advtransfer {

namespace {

using torch::Tensor;

// Minimal r with sum_i |w_i| min(r, bound_i) >= c, then d_i = s_i min(r, bound_i).
void project_row(const float* w, double c, const float* lower, const float* upper, float* d,
                 std::int64_t dim, std::vector<std::int64_t>& order, std::vector<double>& bound) {
  const double sign = c >= 0.0 ? 1.0 : -1.0;
  c = std::abs(c);
  bound.resize(static_cast<std::size_t>(dim));
  double total_w = 0.0;
  for (std::int64_t i = 0; i < dim; ++i) {
    const double wi = sign * w[i];
    bound[i] = wi > 0.0 ? upper[i] : (wi < 0.0 ? -static_cast<double>(lower[i]) : 0.0);
    total_w += std::abs(wi);
  }
  double r = 0.0;
  if (c > 0.0 && total_w > 0.0) {
    order.resize(static_cast<std::size_t>(dim));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return bound[a] < bound[b]; });
    double fixed = 0.0;
    double slope = total_w;
    r = std::numeric_limits<double>::infinity();
    for (const auto i : order) {
      const double wi = std::abs(static_cast<double>(w[i]));
      if (wi == 0.0) continue;
      if (fixed + slope * bound[i] >= c) {
        r = (c - fixed) / slope;
        break;
      }
      fixed += wi * bound[i];
      slope -= wi;
    }
  }
  for (std::int64_t i = 0; i < dim; ++i) {
    const double wi = sign * w[i];
    const double step = std::min(r, bound[i]);
    d[i] = static_cast<float>(wi > 0.0 ? step : (wi < 0.0 ? -step : 0.0));
  }
}

// Row-wise projection of a batch of flattened points onto w.(p + d) = b.
Tensor project_points(const Tensor& points, const Tensor& w, const Tensor& b) {
  const auto p = points.contiguous();
  const auto wc = w.contiguous();
  const auto c = (b - (wc * p).sum(1)).to(torch::kDouble).contiguous();
  const auto lower = (-p).contiguous();
  const auto upper = (1.0 - p).contiguous();
  auto d = torch::zeros_like(p);
  const auto n = p.size(0);
  const auto dim = p.size(1);
  std::vector<std::int64_t> order;
  std::vector<double> bound;
  for (std::int64_t r = 0; r < n; ++r) {
    project_row(wc.data_ptr<float>() + r * dim, c.data_ptr<double>()[r],
                lower.data_ptr<float>() + r * dim, upper.data_ptr<float>() + r * dim,
                d.data_ptr<float>() + r * dim, dim, order, bound);
  }
  return d;
}

}  // namespace

Tensor project_linf_hyperplane(const Tensor& w, double c, const Tensor& lower, const Tensor& upper) {
  if (w.sizes() != lower.sizes() || w.sizes() != upper.sizes()) {
    throw DimensionError("hyperplane projection needs w, lower and upper of equal shape");
  }
  const auto wf = w.to(torch::kFloat32).contiguous().flatten();
  const auto lf = lower.to(torch::kFloat32).contiguous().flatten();
  const auto uf = upper.to(torch::kFloat32).contiguous().flatten();
  auto d = torch::zeros_like(wf);
  std::vector<std::int64_t> order;
  std::vector<double> bound;
  project_row(wf.data_ptr<float>(), c, lf.data_ptr<float>(), uf.data_ptr<float>(),
              d.data_ptr<float>(), wf.numel(), order, bound);
  return d.view(w.sizes());
}

AttackResult fab_t(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                   std::int64_t n_target_classes) {
  budget.validate();
  batch.validate();
  if (batch.encrypted_with) {
    throw CipherError("attacks take plain images; the model applies its own cipher");
  }
  const auto n = batch.size();
  const auto& x = batch.pixels;
  const auto view = std::vector<std::int64_t>{-1, 1, 1, 1};
  const auto clean = model.logits(x);
  const auto order = clean.argsort(1, /*descending=*/true);
  const auto k = std::clamp<std::int64_t>(n_target_classes, 1, model.classes() - 1);

  auto adv = x.clone();
  auto best_norm = torch::full({n}, INFINITY, torch::kFloat32);
  auto done = clean.argmax(1).ne(batch.labels);
  auto aborted = torch::zeros({n}, torch::kBool);
  auto iters = torch::zeros({n}, torch::kInt64);

  for (std::int64_t t = 1; t <= k; ++t) {
    auto rows = done.logical_not().nonzero().flatten();
    if (rows.numel() == 0) break;
    const auto x0 = x.index_select(0, rows);
    const auto labels = batch.labels.index_select(0, rows);
    const auto targets = order.index_select(0, rows).select(1, t).contiguous();
    const auto m = rows.numel();
    const LossFn diff = [labels, targets](const Tensor& z, std::int64_t offset) {
      const auto y = labels.narrow(0, offset, z.size(0)).unsqueeze(1);
      const auto tt = targets.narrow(0, offset, z.size(0)).unsqueeze(1);
      return z.gather(1, y).squeeze(1) - z.gather(1, tt).squeeze(1);
    };

    auto x1 = x0.clone();
    auto norm = torch::full({m}, INFINITY, torch::kFloat32);
    auto found = x0.clone();
    auto bad = torch::zeros({m}, torch::kBool);
    const auto x0_flat = x0.flatten(1);
    for (std::int64_t it = 0; it < budget.max_iterations; ++it) {
      auto g = model.loss_gradient(x1, diff);
      bad = bad | detail::finite_rows(g.loss, g.grad).logical_not();
      torch::NoGradGuard no_grad;
      const auto w = torch::where(bad.view({-1, 1}), torch::zeros_like(g.grad.flatten(1)),
                                  g.grad.flatten(1));
      const auto f = torch::where(bad, torch::zeros_like(g.loss), g.loss);
      const auto x1_flat = x1.flatten(1);
      const auto b = -f + (w * x1_flat).sum(1);
      const auto d3 = project_points(torch::cat({x1_flat, x0_flat}), torch::cat({w, w}),
                                     torch::cat({b, b}));
      const auto d1 = d3.narrow(0, 0, m).view_as(x1);
      const auto d2 = d3.narrow(0, m, m).view_as(x1);
      const auto a0 = d3.abs().amax(1).clamp_min(1e-8);
      const auto a1 = a0.narrow(0, 0, m);
      const auto a2 = a0.narrow(0, m, m);
      const auto alpha = (a1 / (a1 + a2)).clamp(0.0, budget.fab_alpha_max).view(view);
      const auto eta = budget.fab_overshoot;
      auto next = ((x1 + eta * d1) * (1.0 - alpha) + (x0 + eta * d2) * alpha).clamp(0.0, 1.0);
      next = torch::where(bad.view(view), x0, next);

      const auto adversarial = model.logits(next).argmax(1).ne(labels) & bad.logical_not();
      const auto dist = detail::linf_distance(next, x0);
      const auto closer = adversarial & (dist < norm);
      found = torch::where(closer.view(view), next, found);
      norm = torch::where(closer, dist, norm);
      x1 = torch::where(adversarial.view(view), x0 + (next - x0) * budget.fab_backward, next);
    }

    const auto within = norm.le(static_cast<float>(budget.epsilon)) & bad.logical_not();
    const auto current = adv.index_select(0, rows);
    adv.index_copy_(0, rows, torch::where(within.view(view), found, current));
    best_norm.index_copy_(0, rows, torch::where(within, norm, best_norm.index_select(0, rows)));
    done.index_copy_(0, rows, within);
    aborted.index_copy_(0, rows, aborted.index_select(0, rows) | bad);
    iters.index_add_(0, rows, torch::full({m}, budget.max_iterations, torch::kInt64));
  }
  // Guard against float drift at the ball boundary.
  adv = detail::project_ball(adv, x, budget.epsilon);
  const auto pred = model.logits(adv).argmax(1);
  aborted = aborted & pred.eq(batch.labels);
  return detail::finish(batch, adv, pred, iters, aborted);
}

}  // namespace advtransfer
