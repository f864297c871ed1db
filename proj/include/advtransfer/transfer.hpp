#ifndef ADVTRANSFER_TRANSFER_HPP_
#define ADVTRANSFER_TRANSFER_HPP_

// Transferability evaluation. AEs are crafted once per (source, attack) and
// replayed against every target through the target's own pipeline.
//
//   ASR = 100 * #{C_t(x)=y, C_t(x_adv)!=y, C_s(x)=y} / N_c
//   N_c = #{C_s(x)=y, C_t(x)=y}

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "advtransfer/attacks.hpp"
#include "advtransfer/dataset.hpp"
#include "advtransfer/models.hpp"

namespace advtransfer {

struct AsrValue {
  std::optional<double> asr;  // empty when n_c == 0
  std::int64_t fooled = 0;    // numerator
  std::int64_t n_c = 0;
  std::int64_t n = 0;
};

// Predicted-label vectors of equal length N >= 1 (int64).
AsrValue compute_asr(const torch::Tensor& clean_src, const torch::Tensor& clean_tgt,
                     const torch::Tensor& adv_tgt, const torch::Tensor& labels);

enum class Framework { kPlain, kEncryptedSource };
std::string_view framework_name(Framework f);
Framework parse_framework(std::string_view name);

// How AEs are crafted on an encrypted source. End-to-end differentiates
// through the cipher on plain inputs; encrypted-domain attacks the bare
// network on encrypted inputs and decrypts the result.
enum class PerturbationDomain { kEndToEnd, kEncryptedDomain };
std::string_view domain_name(PerturbationDomain d);
PerturbationDomain parse_domain(std::string_view name);

struct TransferCell {
  std::string source_id;
  std::string target_id;
  AttackKind attack = AttackKind::kApgdCe;
  AsrValue value;
  std::string error;  // non-empty marks a hole
};

void to_json(nlohmann::json& j, const TransferCell& cell);
void from_json(const nlohmann::json& j, TransferCell& cell);

// Plain images perturbed by the source. For encrypted sources the
// perturbation delta = x_adv - x is added to the plain image and clipped.
AttackResult craft_examples(Classifier& source, AttackKind attack, const ImageBatch& data,
                            const AttackBudget& budget,
                            PerturbationDomain domain = PerturbationDomain::kEndToEnd);

TransferCell evaluate_transfer(const Classifier& source, const Classifier& target,
                               AttackKind attack, const ImageBatch& data,
                               const ImageBatch& adversarial);

TransferCell run_transfer(Classifier& source, const Classifier& target, AttackKind attack,
                          const ImageBatch& data, const AttackBudget& budget);
// Throws CipherError when the source carries no cipher.
TransferCell run_encrypted_source_transfer(
    Classifier& source, const Classifier& target, AttackKind attack, const ImageBatch& data,
    const AttackBudget& budget, PerturbationDomain domain = PerturbationDomain::kEndToEnd);

struct ModelSummary {
  std::string id;
  ModelFamily family = ModelFamily::kConvMixer;
  std::string label;  // display name, with cipher when encrypted
  double clean_accuracy = 0.0;  // percent, on the evaluation set
};

struct TransferReport {
  Framework framework = Framework::kPlain;
  PerturbationDomain domain = PerturbationDomain::kEndToEnd;
  AttackBudget budget;
  std::vector<AttackKind> attacks;
  std::vector<std::string> sources;
  std::vector<ModelSummary> targets;  // table row order
  std::vector<TransferCell> cells;
  // FNV-1a of the AE bytes per "source/attack"; empty when crafting failed.
  std::map<std::string, std::string> ae_digests;
  std::int64_t n = 0;

  const TransferCell* find(const std::string& source, const std::string& target,
                           AttackKind attack) const;
};

void to_json(nlohmann::json& j, const TransferReport& r);
void from_json(const nlohmann::json& j, TransferReport& r);

using AeCallback = std::function<void(const Classifier& source, AttackKind, const AttackResult&)>;

// Full Cartesian product. Failures leave holes with a reason instead of
// aborting the matrix.
TransferReport run_matrix(const std::vector<Classifier*>& sources,
                          const std::vector<const Classifier*>& targets,
                          const std::vector<AttackKind>& attacks, const ImageBatch& data,
                          const AttackBudget& budget, Framework framework = Framework::kPlain,
                          PerturbationDomain domain = PerturbationDomain::kEndToEnd,
                          const AeCallback& on_examples = {});

std::string tensor_digest(const torch::Tensor& t);
std::string model_label(const ModelSpec& spec);

// One CSV per source: a row per target, a column per attack. Undefined
// cells read "undefined", failed ones "failed".
std::string render_csv(const TransferReport& report, const std::string& source,
                       const std::string& config_hash);
// Monospace tables with per-cell footnotes (seed, N, N_c).
std::string render_table(const TransferReport& report, const std::string& config_hash);

}  // namespace advtransfer

#endif  // ADVTRANSFER_TRANSFER_HPP_
