#include <cstdio>
#include <cstring>
#include <limits>
#include <fstream>
#include <sstream>

#include "advtransfer/attacks.hpp"
#include "advtransfer/errors.hpp"
#include "attack_internal.hpp"

namespace advtransfer {

std::string_view attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::kApgdCe:
      return "APGD-ce";
    case AttackKind::kApgdT:
      return "APGD-t";
    case AttackKind::kFabT:
      return "FAB-t";
    case AttackKind::kSquare:
      return "Square";
  }
  return "?";
}

AttackKind parse_attack(std::string_view name) {
  for (const auto kind : kAllAttacks) {
    if (attack_name(kind) == name) return kind;
  }
  if (name == "apgd-ce" || name == "apgd_ce") return AttackKind::kApgdCe;
  if (name == "apgd-t" || name == "apgd_t") return AttackKind::kApgdT;
  if (name == "fab-t" || name == "fab_t") return AttackKind::kFabT;
  if (name == "square") return AttackKind::kSquare;
  throw ConfigError("unknown attack '" + std::string(name) +
                    "' (expected APGD-ce, APGD-t, FAB-t or Square)");
}

bool attack_is_targeted(AttackKind kind) {
  return kind == AttackKind::kApgdT || kind == AttackKind::kFabT;
}

bool attack_is_white_box(AttackKind kind) { return kind != AttackKind::kSquare; }

void AttackBudget::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("attack epsilon must be >= 0");
  if (max_iterations < 1 || restarts < 1 || max_queries < 1 || n_target_classes < 1) {
    throw ConfigError("attack iteration, restart, query and target limits must be >= 1");
  }
  if (momentum < 0.0 || momentum > 1.0) throw ConfigError("APGD momentum must lie in [0, 1]");
  if (square_p_init <= 0.0 || square_p_init > 1.0) {
    throw ConfigError("Square p_init must lie in (0, 1]");
  }
}

void to_json(nlohmann::json& j, const AttackBudget& b) {
  j = nlohmann::json{{"norm", "Linf"},
                     {"epsilon", b.epsilon},
                     {"max_iterations", b.max_iterations},
                     {"restarts", b.restarts},
                     {"max_queries", b.max_queries},
                     {"n_target_classes", b.n_target_classes},
                     {"momentum", b.momentum},
                     {"rho", b.rho},
                     {"random_start", b.random_start},
                     {"fab_overshoot", b.fab_overshoot},
                     {"fab_backward", b.fab_backward},
                     {"fab_alpha_max", b.fab_alpha_max},
                     {"square_p_init", b.square_p_init},
                     {"seed", b.seed}};
}

void from_json(const nlohmann::json& j, AttackBudget& b) {
  if (j.contains("norm") && j.at("norm").get<std::string>() != "Linf") {
    throw ConfigError("only the Linf norm is supported");
  }
  if (j.contains("epsilon_255")) b.epsilon = j.at("epsilon_255").get<double>() / 255.0;
  b.epsilon = j.value("epsilon", b.epsilon);
  b.max_iterations = j.value("max_iterations", b.max_iterations);
  b.restarts = j.value("restarts", b.restarts);
  b.max_queries = j.value("max_queries", b.max_queries);
  b.n_target_classes = j.value("n_target_classes", b.n_target_classes);
  b.momentum = j.value("momentum", b.momentum);
  b.rho = j.value("rho", b.rho);
  b.random_start = j.value("random_start", b.random_start);
  b.fab_overshoot = j.value("fab_overshoot", b.fab_overshoot);
  b.fab_backward = j.value("fab_backward", b.fab_backward);
  b.fab_alpha_max = j.value("fab_alpha_max", b.fab_alpha_max);
  b.square_p_init = j.value("square_p_init", b.square_p_init);
  b.seed = j.value("seed", b.seed);
  b.validate();
}

torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  return torch::nn::functional::cross_entropy(
      logits, labels, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kNone));
}

torch::Tensor targeted_dlr_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                                const torch::Tensor& targets) {
  const auto z_y = logits.gather(1, labels.unsqueeze(1)).squeeze(1);
  const auto z_t = logits.gather(1, targets.unsqueeze(1)).squeeze(1);
  if (logits.size(1) < 4) return z_t - z_y;
  const auto sorted = std::get<0>(logits.sort(1, /*descending=*/true));
  const auto scale = sorted.select(1, 0) - 0.5 * (sorted.select(1, 2) + sorted.select(1, 3));
  return -(z_y - z_t) / (scale + 1e-12);
}

torch::Tensor margin_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  const auto z_y = logits.gather(1, labels.unsqueeze(1)).squeeze(1);
  const auto others = logits.scatter(1, labels.unsqueeze(1), -std::numeric_limits<float>::infinity());
  return z_y - std::get<0>(others.max(1));
}

namespace detail {

torch::Tensor project_ball(const torch::Tensor& z, const torch::Tensor& x, double eps) {
  return torch::min(torch::max(z, x - eps), x + eps).clamp(0.0, 1.0);
}

torch::Tensor linf_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.size(0) == 0) return torch::empty({0}, torch::kFloat32);
  return (a - b).abs().flatten(1).amax(1).to(torch::kFloat32);
}

torch::Tensor finite_rows(const torch::Tensor& loss, const torch::Tensor& grad) {
  return torch::isfinite(loss) & torch::isfinite(grad).flatten(1).all(1);
}

AttackResult finish(const ImageBatch& batch, torch::Tensor adversarial, torch::Tensor predictions,
                    torch::Tensor iterations, torch::Tensor aborted) {
  AttackResult r;
  r.adversarial = batch;
  r.adversarial.pixels = adversarial.contiguous();
  r.success = predictions.ne(batch.labels) & aborted.logical_not();
  r.iterations = iterations.to(torch::kInt64);
  r.linf = linf_distance(adversarial, batch.pixels);
  r.aborted = aborted;
  return r;
}

}  // namespace detail

AttackResult run_attack(Classifier& model, AttackKind kind, const ImageBatch& batch,
                        const AttackBudget& budget) {
  switch (kind) {
    case AttackKind::kApgdCe:
      return apgd_ce(model, batch, budget);
    case AttackKind::kApgdT:
      return apgd_t(model, batch, budget, budget.n_target_classes);
    case AttackKind::kFabT:
      return fab_t(model, batch, budget, budget.n_target_classes);
    case AttackKind::kSquare:
      return square_attack(static_cast<const Classifier&>(model), batch, budget);
  }
  throw ConfigError("unknown attack");
}

std::map<AttackKind, SuiteEntry> run_attack_suite(Classifier& model, const ImageBatch& batch,
                                                  const AttackBudget& budget,
                                                  std::span<const AttackKind> kinds) {
  budget.validate();
  std::map<AttackKind, SuiteEntry> out;
  for (const auto kind : kinds) {
    SuiteEntry entry;
    try {
      entry.result = run_attack(model, kind, batch, budget);
    } catch (const std::exception& e) {
      entry.error = e.what();
    }
    out.emplace(kind, std::move(entry));
  }
  return out;
}

// ------------------------------------------------------------------ .npy I/O

void save_npy(const std::filesystem::path& path, const torch::Tensor& tensor) {
  const auto t = tensor.to(torch::kFloat32).contiguous();
  std::ostringstream shape;
  shape << '(';
  for (std::int64_t d = 0; d < t.dim(); ++d) shape << t.size(d) << (t.dim() == 1 ? "," : (d + 1 < t.dim() ? ", " : ""));
  shape << ')';
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape.str() + ", }";
  const std::size_t preamble = 10;
  header.append(64 - (preamble + header.size() + 1) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StoreError("cannot write " + path.string());
  out.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xFF), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * 4));
}

torch::Tensor load_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError("cannot read " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, "\x93NUMPY\x01\x00", 8) != 0) throw StoreError("not a v1 .npy file: " + path.string());
  unsigned char len_bytes[2];
  in.read(reinterpret_cast<char*>(len_bytes), 2);
  std::string header(static_cast<std::size_t>(len_bytes[0] | (len_bytes[1] << 8)), '\0');
  in.read(header.data(), static_cast<std::streamsize>(header.size()));
  if (header.find("'<f4'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos) {
    throw StoreError("unsupported .npy layout in " + path.string());
  }
  const auto open = header.find('(', header.find("'shape'"));
  const auto close = header.find(')', open);
  std::vector<std::int64_t> shape;
  std::stringstream dims(header.substr(open + 1, close - open - 1));
  std::string item;
  while (std::getline(dims, item, ',')) {
    if (item.find_first_not_of(' ') != std::string::npos) shape.push_back(std::stoll(item));
  }
  auto t = torch::empty(shape, torch::kFloat32);
  in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * 4));
  if (!in) throw StoreError("truncated .npy file " + path.string());
  return t;
}

void save_attack_result(const std::filesystem::path& npy_path,
                        const std::filesystem::path& ledger_path, const AttackResult& result,
                        const std::string& comment) {
  save_npy(npy_path, result.adversarial.pixels);
  std::ofstream out(ledger_path);
  if (!out) throw StoreError("cannot write " + ledger_path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "index,source_index,label,success,iterations,linf\n";
  const auto n = result.size();
  const auto& src = result.adversarial.source_indices;
  for (std::int64_t i = 0; i < n; ++i) {
    char linf[32];
    std::snprintf(linf, sizeof(linf), "%.9g", result.linf[i].item<double>());
    out << i << ',' << (src.empty() ? i : src[static_cast<std::size_t>(i)]) << ','
        << result.adversarial.labels[i].item<std::int64_t>() << ','
        << (result.success[i].item<bool>() ? 1 : 0) << ','
        << result.iterations[i].item<std::int64_t>() << ',' << linf << '\n';
  }
}

}  // namespace advtransfer
