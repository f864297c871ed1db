#ifndef ADVTRANSFER_DATASET_HPP_
#define ADVTRANSFER_DATASET_HPP_

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "advtransfer/blockcipher_key.hpp"
#include "advtransfer/prng.hpp"

namespace advtransfer {

inline constexpr std::int64_t kNumClasses = 10;
inline constexpr std::int64_t kCorpusSide = 32;

// A labelled batch of square RGB images, pixels in [0, 1].
struct ImageBatch {
  torch::Tensor pixels;  // float32, N x 3 x H x W
  torch::Tensor labels;  // int64, N
  // Index of each example in the split it was drawn from.
  std::vector<std::int64_t> source_indices;
  // Set by encrypt(); cleared by decrypt().
  std::optional<CipherKey> encrypted_with;

  std::int64_t size() const { return pixels.defined() ? pixels.size(0) : 0; }
  std::int64_t side() const { return pixels.size(3); }

  // Throws DimensionError / std::invalid_argument when an invariant fails.
  void validate() const;
};

enum class Split { kTrain, kTest };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

// Reads the CIFAR-10 binary layout (data_batch_{1..5}.bin, test_batch.bin).
// `root` may be the batches directory itself or its parent.
ImageBatch load_corpus(const std::filesystem::path& root, Split split);

// Bilinear resize (half-pixel centers, no antialiasing). Labels unchanged.
ImageBatch resize_batch(const ImageBatch& batch, std::int64_t side);

// Selects examples in the given order; provenance follows the selection.
ImageBatch subset(const ImageBatch& batch, std::span<const std::int64_t> indices);

// `per_class` examples of every class, drawn with the seeded portable PRNG,
// returned in ascending index order. Requesting the whole split returns 0..N-1.
std::vector<std::int64_t> stratified_indices(const torch::Tensor& labels, std::int64_t per_class,
                                             std::uint64_t seed);

std::vector<std::int64_t> class_histogram(const torch::Tensor& labels);

// Lines starting with '#' are comments; `comment` is written as the first line.
void write_index_file(const std::filesystem::path& path, std::span<const std::int64_t> indices,
                      const std::string& comment = {});
std::vector<std::int64_t> read_index_file(const std::filesystem::path& path);

// Random horizontal flip and reflect-pad-4 random crop, drawn from `rng`.
torch::Tensor augment_flip_crop(const torch::Tensor& pixels, Xoshiro256& rng);
// Zeroes one side x side square per image, centred uniformly (may be clipped
// by the border).
torch::Tensor augment_cutout(const torch::Tensor& pixels, std::int64_t side, Xoshiro256& rng);

}  // namespace advtransfer

#endif  // ADVTRANSFER_DATASET_HPP_
