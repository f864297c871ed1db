#ifndef ADVTRANSFER_ATTACKS_HPP_
#define ADVTRANSFER_ATTACKS_HPP_

// The four l-infinity attacks of the AutoAttack suite, each usable on its own:
//
//   APGD-ce  untargeted, white-box   momentum PGD on cross-entropy
//   APGD-t   targeted,   white-box   momentum PGD on the targeted DLR loss
//   FAB-t    targeted,   white-box   minimal-norm boundary projection
//   Square   untargeted, black-box   random search with square patches
//
// Every result satisfies |x_adv - x|_inf <= eps (up to float rounding) and
// x_adv in [0, 1].

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "advtransfer/dataset.hpp"
#include "advtransfer/models.hpp"

namespace advtransfer {

enum class AttackKind { kApgdCe, kApgdT, kFabT, kSquare };

inline constexpr std::array<AttackKind, 4> kAllAttacks = {AttackKind::kApgdCe, AttackKind::kApgdT,
                                                          AttackKind::kFabT, AttackKind::kSquare};

std::string_view attack_name(AttackKind kind);
AttackKind parse_attack(std::string_view name);
bool attack_is_targeted(AttackKind kind);
bool attack_is_white_box(AttackKind kind);

struct AttackBudget {
  double epsilon = 8.0 / 255.0;
  std::int64_t max_iterations = 100;  // APGD / FAB
  std::int64_t restarts = 1;
  std::int64_t max_queries = 5000;    // Square
  std::int64_t n_target_classes = 9;  // APGD-t / FAB-t
  // APGD
  double momentum = 0.75;
  double rho = 0.75;
  bool random_start = false;
  // FAB
  double fab_overshoot = 1.05;
  double fab_backward = 0.9;
  double fab_alpha_max = 0.1;
  // Square
  double square_p_init = 0.8;
  std::uint64_t seed = 0;

  // epsilon may be 0 (degenerate ball); negative values and zero limits throw.
  void validate() const;
};

void to_json(nlohmann::json& j, const AttackBudget& budget);
void from_json(const nlohmann::json& j, AttackBudget& budget);

struct AttackResult {
  ImageBatch adversarial;
  torch::Tensor success;     // bool, N: prediction on x_adv differs from the label
  torch::Tensor iterations;  // int64, N: gradient iterations or score queries spent
  torch::Tensor linf;        // float32, N: |x_adv - x|_inf
  torch::Tensor aborted;     // bool, N: non-finite gradients, left unperturbed

  std::int64_t size() const { return adversarial.size(); }
};

// Best-loss history per APGD iteration, (iterations + 1) x N.
struct ApgdTrace {
  torch::Tensor best_loss;
};

// Per-example losses used by the attacks.
torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& labels);
torch::Tensor targeted_dlr_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                                const torch::Tensor& targets);
torch::Tensor margin_loss(const torch::Tensor& logits, const torch::Tensor& labels);

// APGD checkpoint iterations for an n-iteration run.
std::vector<std::int64_t> apgd_checkpoints(std::int64_t iterations);

// Generic APGD ascent on `loss`, returning the best-loss iterate.
AttackResult apgd(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                  const LossFn& loss, ApgdTrace* trace = nullptr);

AttackResult apgd_ce(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                     ApgdTrace* trace = nullptr);
AttackResult apgd_t(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                    std::int64_t n_target_classes);
AttackResult fab_t(Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
                   std::int64_t n_target_classes);

// Minimal l-inf step d with w.d = c and lower <= d <= upper (lower <= 0 <=
// upper). Saturates the box when the hyperplane is out of reach.
torch::Tensor project_linf_hyperplane(const torch::Tensor& w, double c, const torch::Tensor& lower,
                                      const torch::Tensor& upper);

// Black-box handle: scores only.
using ScoreFn = std::function<torch::Tensor(const torch::Tensor& pixels)>;

// Square side for iterations 0..max_queries-2; iteration 0 is the stripe
// initialisation, which follows one clean query.
std::vector<std::int64_t> square_schedule_sides(std::int64_t max_queries, double p_init,
                                                std::int64_t side);
AttackResult square_attack(const ScoreFn& scores, const ImageBatch& batch,
                           const AttackBudget& budget);
AttackResult square_attack(const Classifier& model, const ImageBatch& batch,
                           const AttackBudget& budget);

AttackResult run_attack(Classifier& model, AttackKind kind, const ImageBatch& batch,
                        const AttackBudget& budget);

struct SuiteEntry {
  std::optional<AttackResult> result;
  std::string error;  // set when the attack threw
};

// Runs each attack independently on the same inputs.
std::map<AttackKind, SuiteEntry> run_attack_suite(
    Classifier& model, const ImageBatch& batch, const AttackBudget& budget,
    std::span<const AttackKind> kinds = kAllAttacks);

// x_adv as a float32 .npy array plus a CSV ledger
// (index, source_index, label, success, iterations, linf). A non-empty
// `comment` becomes a leading '#' line of the ledger.
void save_attack_result(const std::filesystem::path& npy_path,
                        const std::filesystem::path& ledger_path, const AttackResult& result,
                        const std::string& comment = {});
torch::Tensor load_npy(const std::filesystem::path& path);
void save_npy(const std::filesystem::path& path, const torch::Tensor& tensor);

}  // namespace advtransfer

#endif  // ADVTRANSFER_ATTACKS_HPP_
