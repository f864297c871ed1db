#include "advtransfer/blockcipher.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

#include "advtransfer/errors.hpp"
#include "advtransfer/prng.hpp"

namespace advtransfer {

std::string_view algorithm_name(CipherAlgorithm algorithm) {
  switch (algorithm) {
    case CipherAlgorithm::kShf:
      return "SHF";
    case CipherAlgorithm::kNp:
      return "NP";
    case CipherAlgorithm::kFfx:
      return "FFX";
  }
  return "?";
}

CipherAlgorithm parse_algorithm(std::string_view name) {
  if (name == "SHF" || name == "shf") return CipherAlgorithm::kShf;
  if (name == "NP" || name == "np") return CipherAlgorithm::kNp;
  if (name == "FFX" || name == "ffx") return CipherAlgorithm::kFfx;
  throw ConfigError("unknown cipher algorithm '" + std::string(name) + "' (expected SHF, NP or FFX)");
}

std::string describe(const CipherKey& key) {
  std::ostringstream os;
  os << algorithm_name(key.algorithm) << "/M=" << key.block_size << "/seed=" << key.seed;
  return os.str();
}

void to_json(nlohmann::json& j, const CipherKey& key) {
  j = nlohmann::json{{"algorithm", algorithm_name(key.algorithm)},
                     {"block_size", key.block_size},
                     {"seed", key.seed}};
}

void from_json(const nlohmann::json& j, CipherKey& key) {
  key.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
  key.block_size = j.at("block_size").get<std::int64_t>();
  key.seed = j.at("seed").get<std::uint64_t>();
  if (key.block_size < 1) throw ConfigError("cipher block_size must be >= 1");
}

namespace {

void check_tiling(std::int64_t height, std::int64_t width, std::int64_t block_size) {
  if (block_size < 1 || height % block_size != 0 || width % block_size != 0) {
    std::ostringstream os;
    os << "image of H=" << height << ", W=" << width << " cannot be tiled by blocks of M="
       << block_size;
    throw DimensionError(os.str());
  }
}

// The k/255 grid as float32, shared with the corpus loader.
const torch::Tensor& grid_values() {
  static const torch::Tensor table = torch::arange(256, torch::kFloat32) / 255.0f;
  return table;
}

torch::Tensor lookup(const std::array<std::uint8_t, 256>& map) {
  std::array<std::int64_t, 256> wide{};
  std::copy(map.begin(), map.end(), wide.begin());
  return torch::tensor(std::vector<std::int64_t>(wide.begin(), wide.end()), torch::kInt64);
}

// Rearranges a block-flattened tensor N x Bh x Bw x 3M^2 back to images.
torch::Tensor unflatten_blocks(const torch::Tensor& flat, std::int64_t block_size) {
  const auto n = flat.size(0);
  BlockGrid grid{flat.reshape({n, flat.size(1), flat.size(2), 3, block_size, block_size}),
                 block_size};
  return merge_blocks(grid);
}

torch::Tensor flatten_blocks(const torch::Tensor& pixels, std::int64_t block_size) {
  const auto grid = split_blocks(pixels, block_size);
  return grid.blocks.reshape(
      {grid.blocks.size(0), grid.rows(), grid.cols(), 3 * block_size * block_size});
}

torch::Tensor np_flip(const torch::Tensor& pixels, const TransformParams& params) {
  const auto m = params.key.block_size;
  const auto flat = flatten_blocks(pixels, m);
  std::vector<std::uint8_t> mask_bytes = params.mask;
  const auto mask =
      torch::tensor(std::vector<std::int64_t>(mask_bytes.begin(), mask_bytes.end()), torch::kInt64)
          .to(torch::kBool);
  const auto q = quantize_8bit(flat.detach());
  const auto flipped = grid_values().index({255 - q}).to(flat.dtype());
  // Exact grid values forward, slope -1 backward.
  const auto straight_through = flipped - (flat - flat.detach());
  return unflatten_blocks(torch::where(mask, straight_through, flat), m);
}

torch::Tensor ffx_map(const torch::Tensor& pixels, const TransformParams& params,
                      const std::array<std::uint8_t, 256>& map) {
  check_tiling(pixels.size(2), pixels.size(3), params.key.block_size);
  const auto q = quantize_8bit(pixels.detach());
  const auto mapped = grid_values().index({lookup(map).index({q})}).to(pixels.dtype());
  return mapped + (pixels - pixels.detach());
}

torch::Tensor shuffle_blocks(const torch::Tensor& pixels, const std::vector<std::int64_t>& order,
                             std::int64_t block_size) {
  const auto flat = flatten_blocks(pixels, block_size);
  const auto index = torch::tensor(order, torch::kInt64);
  return unflatten_blocks(flat.index_select(3, index), block_size);
}

}  // namespace

BlockGrid split_blocks(const torch::Tensor& pixels, std::int64_t block_size) {
  TORCH_CHECK(pixels.dim() == 4 && pixels.size(1) == 3, "expected N x 3 x H x W pixels");
  const auto n = pixels.size(0);
  const auto h = pixels.size(2);
  const auto w = pixels.size(3);
  check_tiling(h, w, block_size);
  const auto bh = h / block_size;
  const auto bw = w / block_size;
  auto blocks = pixels.reshape({n, 3, bh, block_size, bw, block_size})
                    .permute({0, 2, 4, 1, 3, 5})
                    .contiguous();
  return {blocks, block_size};
}

BlockGrid split_blocks(const ImageBatch& batch, std::int64_t block_size) {
  return split_blocks(batch.pixels, block_size);
}

torch::Tensor merge_blocks(const BlockGrid& grid) {
  const auto& b = grid.blocks;
  const auto m = grid.block_size;
  return b.permute({0, 3, 1, 4, 2, 5}).reshape({b.size(0), 3, b.size(1) * m, b.size(2) * m});
}

std::uint8_t feistel_round(std::uint8_t half, int round, std::uint64_t subkey) {
  const std::uint64_t tweak = (static_cast<std::uint64_t>(round) << 4) | (half & 0x0F);
  return static_cast<std::uint8_t>(mix64(subkey ^ tweak) & 0x0F);
}

std::uint8_t ffx_encrypt_value(std::uint8_t value,
                               std::span<const std::uint64_t, kFeistelRounds> round_keys) {
  std::uint8_t left = value >> 4;
  std::uint8_t right = value & 0x0F;
  for (int r = 0; r < kFeistelRounds; ++r) {
    const std::uint8_t next_right = left ^ feistel_round(right, r, round_keys[r]);
    left = right;
    right = next_right;
  }
  return static_cast<std::uint8_t>((left << 4) | right);
}

std::uint8_t ffx_decrypt_value(std::uint8_t value,
                               std::span<const std::uint64_t, kFeistelRounds> round_keys) {
  std::uint8_t left = value >> 4;
  std::uint8_t right = value & 0x0F;
  for (int r = kFeistelRounds - 1; r >= 0; --r) {
    const std::uint8_t prev_left = right ^ feistel_round(left, r, round_keys[r]);
    right = left;
    left = prev_left;
  }
  return static_cast<std::uint8_t>((left << 4) | right);
}

TransformParams derive_params(const CipherKey& key) {
  if (key.block_size < 1) throw ConfigError("cipher block_size must be >= 1");
  TransformParams params;
  params.key = key;
  const auto length = static_cast<std::size_t>(3 * key.block_size * key.block_size);
  const bool null_key = key.seed == CipherKey::kNullSeed;
  Xoshiro256 rng(key.seed);
  switch (key.algorithm) {
    case CipherAlgorithm::kShf:
      params.permutation.resize(length);
      std::iota(params.permutation.begin(), params.permutation.end(), std::int64_t{0});
      if (!null_key) shuffle(std::span<std::int64_t>(params.permutation), rng);
      break;
    case CipherAlgorithm::kNp:
      params.mask.assign(length, 0);
      if (!null_key) {
        for (auto& bit : params.mask) bit = rng.coin() ? 1 : 0;
      }
      break;
    case CipherAlgorithm::kFfx:
      if (!null_key) {
        for (auto& k : params.round_keys) k = rng.next();
      }
      for (int v = 0; v < 256; ++v) {
        const auto value = static_cast<std::uint8_t>(v);
        params.ffx_forward[v] = null_key ? value : ffx_encrypt_value(value, params.round_keys);
      }
      for (int v = 0; v < 256; ++v) params.ffx_inverse[params.ffx_forward[v]] = static_cast<std::uint8_t>(v);
      break;
  }
  return params;
}

torch::Tensor quantize_8bit(const torch::Tensor& pixels) {
  return torch::floor(pixels.to(torch::kFloat32) * 255.0f + 0.5f).clamp(0, 255).to(torch::kInt64);
}

torch::Tensor encrypt_pixels(const torch::Tensor& pixels, const TransformParams& params) {
  const auto m = params.key.block_size;
  switch (params.key.algorithm) {
    case CipherAlgorithm::kShf:
      return shuffle_blocks(pixels, params.permutation, m);
    case CipherAlgorithm::kNp:
      return np_flip(pixels, params);
    case CipherAlgorithm::kFfx:
      return ffx_map(pixels, params, params.ffx_forward);
  }
  throw CipherError("unsupported cipher algorithm");
}

torch::Tensor decrypt_pixels(const torch::Tensor& pixels, const TransformParams& params) {
  const auto m = params.key.block_size;
  switch (params.key.algorithm) {
    case CipherAlgorithm::kShf: {
      std::vector<std::int64_t> inverse(params.permutation.size());
      for (std::size_t i = 0; i < inverse.size(); ++i) {
        inverse[static_cast<std::size_t>(params.permutation[i])] = static_cast<std::int64_t>(i);
      }
      return shuffle_blocks(pixels, inverse, m);
    }
    case CipherAlgorithm::kNp:
      return np_flip(pixels, params);
    case CipherAlgorithm::kFfx:
      return ffx_map(pixels, params, params.ffx_inverse);
  }
  throw CipherError("unsupported cipher algorithm");
}

ImageBatch encrypt(const ImageBatch& batch, const CipherKey& key) {
  ImageBatch out = batch;
  torch::NoGradGuard no_grad;
  out.pixels = encrypt_pixels(batch.pixels, derive_params(key)).contiguous();
  out.encrypted_with = key;
  return out;
}

ImageBatch decrypt(const ImageBatch& batch, const CipherKey& key) {
  if (!batch.encrypted_with) {
    throw CipherError("decrypt: batch carries no encryption tag (was it produced by encrypt?)");
  }
  const auto& tag = *batch.encrypted_with;
  if (tag.algorithm != key.algorithm || tag.block_size != key.block_size) {
    throw CipherError("decrypt: batch was encrypted with " + describe(tag) +
                      " but the key is " + describe(key));
  }
  ImageBatch out = batch;
  torch::NoGradGuard no_grad;
  out.pixels = decrypt_pixels(batch.pixels, derive_params(key)).contiguous();
  out.encrypted_with.reset();
  return out;
}

void write_key_file(const std::filesystem::path& path, const CipherKey& key) {
  std::ofstream out(path);
  if (!out) throw StoreError("cannot write key file " + path.string());
  out << nlohmann::json(key).dump(2) << '\n';
}

CipherKey read_key_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StoreError("cannot read key file " + path.string());
  try {
    return nlohmann::json::parse(in).get<CipherKey>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed key file " + path.string() + ": " + e.what());
  }
}

}  // namespace advtransfer
