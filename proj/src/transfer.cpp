#include "advtransfer/transfer.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "advtransfer/blockcipher.hpp"
#include "advtransfer/errors.hpp"
#include "attack_internal.hpp"

namespace advtransfer {

AsrValue compute_asr(const torch::Tensor& clean_src, const torch::Tensor& clean_tgt,
                     const torch::Tensor& adv_tgt, const torch::Tensor& labels) {
  const auto n = labels.numel();
  if (n < 1 || clean_src.numel() != n || clean_tgt.numel() != n || adv_tgt.numel() != n) {
    throw DimensionError("compute_asr needs four label vectors of equal length >= 1");
  }
  const auto y = labels.flatten();
  const auto src_ok = clean_src.flatten().eq(y);
  const auto tgt_ok = clean_tgt.flatten().eq(y);
  const auto fooled = tgt_ok & adv_tgt.flatten().ne(y) & src_ok;
  AsrValue v;
  v.n = n;
  v.n_c = (src_ok & tgt_ok).sum().item<std::int64_t>();
  v.fooled = fooled.sum().item<std::int64_t>();
  if (v.n_c > 0) v.asr = 100.0 * static_cast<double>(v.fooled) / static_cast<double>(v.n_c);
  return v;
}

std::string_view framework_name(Framework f) {
  return f == Framework::kPlain ? "plain" : "encrypted_source";
}

Framework parse_framework(std::string_view name) {
  if (name == "plain") return Framework::kPlain;
  if (name == "encrypted_source") return Framework::kEncryptedSource;
  throw ConfigError("unknown transfer framework '" + std::string(name) +
                    "' (expected plain or encrypted_source)");
}

std::string_view domain_name(PerturbationDomain d) {
  return d == PerturbationDomain::kEndToEnd ? "end_to_end" : "encrypted_domain";
}

PerturbationDomain parse_domain(std::string_view name) {
  if (name == "end_to_end") return PerturbationDomain::kEndToEnd;
  if (name == "encrypted_domain") return PerturbationDomain::kEncryptedDomain;
  throw ConfigError("unknown perturbation domain '" + std::string(name) +
                    "' (expected end_to_end or encrypted_domain)");
}

void to_json(nlohmann::json& j, const TransferCell& c) {
  j = nlohmann::json{{"source", c.source_id},
                     {"target", c.target_id},
                     {"attack", attack_name(c.attack)},
                     {"asr", c.value.asr ? nlohmann::json(*c.value.asr) : nlohmann::json(nullptr)},
                     {"fooled", c.value.fooled},
                     {"n_c", c.value.n_c},
                     {"n", c.value.n},
                     {"error", c.error}};
}

void from_json(const nlohmann::json& j, TransferCell& c) {
  c.source_id = j.at("source").get<std::string>();
  c.target_id = j.at("target").get<std::string>();
  c.attack = parse_attack(j.at("attack").get<std::string>());
  c.value.asr.reset();
  if (!j.at("asr").is_null()) c.value.asr = j.at("asr").get<double>();
  c.value.fooled = j.at("fooled").get<std::int64_t>();
  c.value.n_c = j.at("n_c").get<std::int64_t>();
  c.value.n = j.at("n").get<std::int64_t>();
  c.error = j.value("error", "");
}

AttackResult craft_examples(Classifier& source, AttackKind attack, const ImageBatch& data,
                            const AttackBudget& budget, PerturbationDomain domain) {
  // End-to-end outputs are already x + delta clipped to [0, 1].
  if (!source.encrypted() || domain == PerturbationDomain::kEndToEnd) {
    return run_attack(source, attack, data, budget);
  }
  auto bare_spec = source.spec();
  bare_spec.cipher.reset();
  Classifier bare(bare_spec, source.network());
  const auto& params = *source.cipher_params();
  ImageBatch enc = data;
  {
    torch::NoGradGuard no_grad;
    enc.pixels = encrypt_pixels(data.pixels, params);
  }
  auto r = run_attack(bare, attack, enc, budget);
  torch::NoGradGuard no_grad;
  const auto delta = decrypt_pixels(r.adversarial.pixels, params) - data.pixels;
  const auto x_adv = detail::project_ball(data.pixels + delta, data.pixels, budget.epsilon);
  r.adversarial = data;
  r.adversarial.pixels = x_adv;
  r.linf = detail::linf_distance(x_adv, data.pixels);
  r.success = source.logits(x_adv).argmax(1).ne(data.labels) & r.aborted.logical_not();
  return r;
}

TransferCell evaluate_transfer(const Classifier& source, const Classifier& target,
                               AttackKind attack, const ImageBatch& data,
                               const ImageBatch& adversarial) {
  TransferCell cell{source.spec().id, target.spec().id, attack, {}, {}};
  const auto clean_src = source.logits(data.pixels).argmax(1);
  const auto clean_tgt = target.logits(data.pixels).argmax(1);
  const auto adv_tgt = target.logits(adversarial.pixels).argmax(1);
  cell.value = compute_asr(clean_src, clean_tgt, adv_tgt, data.labels);
  return cell;
}

TransferCell run_transfer(Classifier& source, const Classifier& target, AttackKind attack,
                          const ImageBatch& data, const AttackBudget& budget) {
  const auto r = craft_examples(source, attack, data, budget);
  return evaluate_transfer(source, target, attack, data, r.adversarial);
}

TransferCell run_encrypted_source_transfer(Classifier& source, const Classifier& target,
                                           AttackKind attack, const ImageBatch& data,
                                           const AttackBudget& budget,
                                           PerturbationDomain domain) {
  if (!source.encrypted()) {
    throw CipherError("encrypted-source transfer needs a source model with a cipher key ('" +
                      source.spec().id + "' has none)");
  }
  const auto r = craft_examples(source, attack, data, budget, domain);
  return evaluate_transfer(source, target, attack, data, r.adversarial);
}

const TransferCell* TransferReport::find(const std::string& source, const std::string& target,
                                         AttackKind attack) const {
  for (const auto& c : cells) {
    if (c.source_id == source && c.target_id == target && c.attack == attack) return &c;
  }
  return nullptr;
}

void to_json(nlohmann::json& j, const TransferReport& r) {
  std::vector<std::string> attacks;
  for (const auto a : r.attacks) attacks.emplace_back(attack_name(a));
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : r.targets) {
    targets.push_back({{"id", t.id},
                       {"family", family_name(t.family)},
                       {"label", t.label},
                       {"clean_accuracy", t.clean_accuracy}});
  }
  j = nlohmann::json{{"framework", framework_name(r.framework)},
                     {"domain", domain_name(r.domain)},
                     {"budget", r.budget},
                     {"attacks", attacks},
                     {"sources", r.sources},
                     {"targets", targets},
                     {"cells", r.cells},
                     {"ae_digests", r.ae_digests},
                     {"n", r.n}};
}

void from_json(const nlohmann::json& j, TransferReport& r) {
  r.framework = parse_framework(j.at("framework").get<std::string>());
  r.domain = parse_domain(j.at("domain").get<std::string>());
  r.budget = j.at("budget").get<AttackBudget>();
  r.attacks.clear();
  for (const auto& a : j.at("attacks")) r.attacks.push_back(parse_attack(a.get<std::string>()));
  r.sources = j.at("sources").get<std::vector<std::string>>();
  r.targets.clear();
  for (const auto& t : j.at("targets")) {
    r.targets.push_back({t.at("id").get<std::string>(), parse_family(t.at("family").get<std::string>()),
                         t.at("label").get<std::string>(), t.at("clean_accuracy").get<double>()});
  }
  r.cells = j.at("cells").get<std::vector<TransferCell>>();
  r.ae_digests = j.at("ae_digests").get<std::map<std::string, std::string>>();
  r.n = j.at("n").get<std::int64_t>();
}

std::string tensor_digest(const torch::Tensor& t) {
  const auto c = t.contiguous();
  const auto* p = static_cast<const unsigned char*>(c.data_ptr());
  const auto bytes = static_cast<std::size_t>(c.numel()) * c.element_size();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string model_label(const ModelSpec& spec) {
  std::string label(family_display_name(spec.family));
  if (spec.cipher) {
    label += " " + std::string(algorithm_name(spec.cipher->algorithm)) +
             " M=" + std::to_string(spec.cipher->block_size);
  }
  return label;
}

TransferReport run_matrix(const std::vector<Classifier*>& sources,
                          const std::vector<const Classifier*>& targets,
                          const std::vector<AttackKind>& attacks, const ImageBatch& data,
                          const AttackBudget& budget, Framework framework,
                          PerturbationDomain domain, const AeCallback& on_examples) {
  if (sources.empty() || targets.empty() || attacks.empty()) {
    throw ConfigError("run_matrix needs at least one source, one target and one attack");
  }
  budget.validate();
  TransferReport report;
  report.framework = framework;
  report.domain = domain;
  report.budget = budget;
  report.attacks = attacks;
  report.n = data.size();

  std::vector<const Classifier*> rows = targets;
  std::stable_sort(rows.begin(), rows.end(), [](const Classifier* a, const Classifier* b) {
    return family_rank(a->spec().family) < family_rank(b->spec().family);
  });
  for (const auto* t : rows) {
    report.targets.push_back(
        {t->spec().id, t->spec().family, model_label(t->spec()), accuracy(*t, data)});
  }
  // Rows that would read the same get their id appended.
  std::map<std::string, int> seen;
  for (const auto& row : report.targets) ++seen[row.label];
  for (auto& row : report.targets) {
    if (seen[row.label] > 1) row.label += " (" + row.id + ")";
  }

  for (auto* source : sources) {
    report.sources.push_back(source->spec().id);
    if (framework == Framework::kEncryptedSource && !source->encrypted()) {
      throw CipherError("encrypted_source framework: source '" + source->spec().id +
                        "' has no cipher key");
    }
    for (const auto attack : attacks) {
      const auto key = source->spec().id + "/" + std::string(attack_name(attack));
      std::optional<AttackResult> crafted;
      std::string error;
      try {
        crafted = craft_examples(*source, attack, data, budget, domain);
        if (on_examples) on_examples(*source, attack, *crafted);
      } catch (const std::exception& e) {
        error = std::string("attack failed: ") + e.what();
      }
      report.ae_digests[key] = crafted ? tensor_digest(crafted->adversarial.pixels) : "";
      for (const auto* target : rows) {
        TransferCell cell{source->spec().id, target->spec().id, attack, {}, error};
        if (crafted) {
          try {
            cell = evaluate_transfer(*source, *target, attack, data, crafted->adversarial);
          } catch (const std::exception& e) {
            cell.error = std::string("evaluation failed: ") + e.what();
          }
        }
        report.cells.push_back(std::move(cell));
      }
    }
  }
  return report;
}

namespace {

std::string format_asr(const TransferCell& c) {
  if (!c.error.empty()) return "failed";
  if (!c.value.asr) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *c.value.asr);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace

std::string render_csv(const TransferReport& report, const std::string& source,
                       const std::string& config_hash) {
  std::ostringstream os;
  os << "# config_hash=" << config_hash << " source=" << source
     << " framework=" << framework_name(report.framework) << " n=" << report.n << "\n";
  os << "target,model";
  for (const auto a : report.attacks) os << ',' << attack_name(a);
  os << ",n_c\n";
  for (const auto& t : report.targets) {
    os << csv_escape(t.label) << ',' << csv_escape(t.id);
    std::int64_t n_c = -1;
    for (const auto a : report.attacks) {
      const auto* c = report.find(source, t.id, a);
      os << ',' << (c ? format_asr(*c) : "failed");
      if (c && c->error.empty()) n_c = c->value.n_c;
    }
    os << ',' << (n_c < 0 ? std::string("failed") : std::to_string(n_c)) << '\n';
  }
  return os.str();
}

std::string render_table(const TransferReport& report, const std::string& config_hash) {
  std::ostringstream os;
  std::vector<std::string> notes;
  for (const auto& source : report.sources) {
    os << "Source: " << source << "  (framework " << framework_name(report.framework)
       << ", eps " << std::lround(report.budget.epsilon * 255.0) << "/255, N " << report.n
       << ", config " << config_hash << ")\n";

    std::vector<std::string> header = {"Target", "Acc"};
    for (const auto a : report.attacks) header.emplace_back(attack_name(a));
    std::vector<std::vector<std::string>> body;
    for (const auto& t : report.targets) {
      char acc[16];
      std::snprintf(acc, sizeof(acc), "%.2f", t.clean_accuracy);
      std::vector<std::string> row = {t.label, acc};
      for (const auto a : report.attacks) {
        const auto* c = report.find(source, t.id, a);
        const auto mark = "[" + std::to_string(notes.size() + 1) + "]";
        if (!c) {
          row.push_back("failed " + mark);
          notes.push_back(mark + " " + source + " -> " + t.id + ", " + std::string(attack_name(a)) +
                          ": missing cell");
          continue;
        }
        row.push_back(format_asr(*c) + " " + mark);
        std::string note = mark + " " + source + " -> " + t.id + ", " +
                           std::string(attack_name(a)) + ": seed " + std::to_string(report.budget.seed) +
                           ", N " + std::to_string(c->value.n) + ", N_c " + std::to_string(c->value.n_c);
        if (!c->error.empty()) note += ", " + c->error;
        notes.push_back(note);
      }
      body.push_back(std::move(row));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
    for (const auto& row : body) {
      for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    }
    const auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        os << (i == 0 ? "" : "  ");
        if (i == 0) {
          os << cells[i] << std::string(width[i] - cells[i].size(), ' ');
        } else {
          os << std::string(width[i] - cells[i].size(), ' ') << cells[i];
        }
      }
      os << '\n';
    };
    std::size_t total = 0;
    for (const auto w : width) total += w + 2;
    line(header);
    os << std::string(total - 2, '-') << '\n';
    for (const auto& row : body) line(row);
    os << '\n';
  }
  for (const auto& n : notes) os << n << '\n';
  return os.str();
}

}  // namespace advtransfer
