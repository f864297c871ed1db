#ifndef ADVTRANSFER_BLOCKCIPHER_KEY_HPP_
#define ADVTRANSFER_BLOCKCIPHER_KEY_HPP_

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

namespace advtransfer {

enum class CipherAlgorithm { kShf, kNp, kFfx };

std::string_view algorithm_name(CipherAlgorithm algorithm);
CipherAlgorithm parse_algorithm(std::string_view name);

// Secret key of the block-wise transform. Seed 0 is the null key: every
// algorithm derives the identity transform from it.
struct CipherKey {
  static constexpr std::uint64_t kNullSeed = 0;

  CipherAlgorithm algorithm = CipherAlgorithm::kShf;
  std::int64_t block_size = 16;
  std::uint64_t seed = kNullSeed;

  bool operator==(const CipherKey&) const = default;
};

std::string describe(const CipherKey& key);

void to_json(nlohmann::json& j, const CipherKey& key);
void from_json(const nlohmann::json& j, CipherKey& key);

}  // namespace advtransfer

#endif  // ADVTRANSFER_BLOCKCIPHER_KEY_HPP_
