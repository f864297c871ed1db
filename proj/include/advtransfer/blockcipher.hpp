#ifndef ADVTRANSFER_BLOCKCIPHER_HPP_
#define ADVTRANSFER_BLOCKCIPHER_HPP_

// Block-wise keyed image transforms: pixel shuffling (SHF), negative-positive
// flipping (NP) and a format-preserving Feistel map (FFX).
//
// An image is tiled into non-overlapping M x M blocks (raster order). Each
// block is viewed as one flattened vector of 3*M*M elements in (channel, row,
// column) order, and the same keyed transform is applied to every block.
//
//   SHF  enc[i] = plain[perm[i]]                 (exact, any real pixels)
//   NP   masked elements v -> 255 - v on the 8-bit grid, i.e. p -> 1 - p
//   FFX  q = floor(255 p + 1/2); p -> ffx(q) / 255 with a keyed bijection of
//        {0..255}; 10-round balanced Feistel on 4-bit halves
//
// The exact constructions and test vectors are pinned in docs/formats.md.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "advtransfer/blockcipher_key.hpp"
#include "advtransfer/dataset.hpp"

namespace advtransfer {

inline constexpr int kFeistelRounds = 10;

// N x Bh x Bw x 3 x M x M view of a batch.
struct BlockGrid {
  torch::Tensor blocks;
  std::int64_t block_size = 0;

  std::int64_t rows() const { return blocks.size(1); }
  std::int64_t cols() const { return blocks.size(2); }
};

BlockGrid split_blocks(const torch::Tensor& pixels, std::int64_t block_size);
BlockGrid split_blocks(const ImageBatch& batch, std::int64_t block_size);
torch::Tensor merge_blocks(const BlockGrid& grid);

// Everything a key expands to. Only the member for key.algorithm is filled.
struct TransformParams {
  CipherKey key;
  std::vector<std::int64_t> permutation;   // SHF, length 3*M*M
  std::vector<std::uint8_t> mask;          // NP, length 3*M*M, values 0/1
  std::array<std::uint64_t, kFeistelRounds> round_keys{};  // FFX
  std::array<std::uint8_t, 256> ffx_forward{};
  std::array<std::uint8_t, 256> ffx_inverse{};

  bool operator==(const TransformParams&) const = default;
};

TransformParams derive_params(const CipherKey& key);

// Feistel round function: keyed hash of (half, round, subkey) reduced mod 16.
std::uint8_t feistel_round(std::uint8_t half, int round, std::uint64_t subkey);
std::uint8_t ffx_encrypt_value(std::uint8_t value,
                               std::span<const std::uint64_t, kFeistelRounds> round_keys);
std::uint8_t ffx_decrypt_value(std::uint8_t value,
                               std::span<const std::uint64_t, kFeistelRounds> round_keys);

// Round-half-up quantization used by NP and FFX.
torch::Tensor quantize_8bit(const torch::Tensor& pixels);

// Differentiable forward transform on N x 3 x H x W pixels. SHF is exact;
// NP and FFX pass gradients straight through their quantizers (NP with
// derivative -1 on masked elements, FFX with the identity).
torch::Tensor encrypt_pixels(const torch::Tensor& pixels, const TransformParams& params);
torch::Tensor decrypt_pixels(const torch::Tensor& pixels, const TransformParams& params);

ImageBatch encrypt(const ImageBatch& batch, const CipherKey& key);
// Throws CipherError unless `batch` was produced by encrypt() with a key of
// the same algorithm and block size.
ImageBatch decrypt(const ImageBatch& batch, const CipherKey& key);

void write_key_file(const std::filesystem::path& path, const CipherKey& key);
CipherKey read_key_file(const std::filesystem::path& path);

}  // namespace advtransfer

#endif  // ADVTRANSFER_BLOCKCIPHER_HPP_
