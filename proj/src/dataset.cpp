#include "advtransfer/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>

#include "advtransfer/errors.hpp"

namespace advtransfer {

namespace {

constexpr std::int64_t kRecordsPerFile = 10000;
constexpr std::int64_t kImageBytes = 3 * kCorpusSide * kCorpusSide;
constexpr std::int64_t kRecordBytes = kImageBytes + 1;

std::filesystem::path resolve_batches_dir(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (fs::exists(root / "test_batch.bin") || fs::exists(root / "data_batch_1.bin")) return root;
  if (fs::exists(root / "cifar-10-batches-bin")) return root / "cifar-10-batches-bin";
  return root;
}

std::vector<std::uint8_t> read_batch_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError("corpus file missing or unreadable: " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (static_cast<std::int64_t>(bytes.size()) != kRecordsPerFile * kRecordBytes) {
    std::ostringstream os;
    os << "corpus file " << file.string() << " has " << bytes.size() << " bytes, expected "
       << kRecordsPerFile * kRecordBytes;
    throw IngestionError(os.str());
  }
  for (std::int64_t r = 0; r < kRecordsPerFile; ++r) {
    if (bytes[static_cast<std::size_t>(r * kRecordBytes)] >= kNumClasses) {
      std::ostringstream os;
      os << "corpus file " << file.string() << " record " << r << " has label "
         << static_cast<int>(bytes[static_cast<std::size_t>(r * kRecordBytes)]);
      throw IngestionError(os.str());
    }
  }
  return bytes;
}

}  // namespace

void ImageBatch::validate() const {
  if (!pixels.defined() || pixels.dim() != 4 || pixels.size(1) != 3) {
    throw DimensionError("ImageBatch pixels must be N x 3 x H x W");
  }
  if (pixels.size(2) != pixels.size(3)) {
    throw DimensionError("ImageBatch images must be square, got " +
                         std::to_string(pixels.size(2)) + " x " + std::to_string(pixels.size(3)));
  }
  if (!labels.defined() || labels.dim() != 1 || labels.size(0) != pixels.size(0)) {
    throw DimensionError("ImageBatch labels length must equal the batch count");
  }
  if (!source_indices.empty() && static_cast<std::int64_t>(source_indices.size()) != size()) {
    throw DimensionError("ImageBatch provenance length must equal the batch count");
  }
  if (size() > 0) {
    if (pixels.min().item<double>() < 0.0 || pixels.max().item<double>() > 1.0) {
      throw std::invalid_argument("ImageBatch pixels must lie in [0, 1]");
    }
    if (labels.min().item<std::int64_t>() < 0) {
      throw std::invalid_argument("ImageBatch labels must be non-negative");
    }
  }
}

std::string_view split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train or test)");
}

ImageBatch load_corpus(const std::filesystem::path& root, Split split) {
  const auto dir = resolve_batches_dir(root);
  std::vector<std::filesystem::path> files;
  if (split == Split::kTrain) {
    for (int b = 1; b <= 5; ++b) files.push_back(dir / ("data_batch_" + std::to_string(b) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  const auto n = static_cast<std::int64_t>(files.size()) * kRecordsPerFile;
  auto raw = torch::empty({n, kImageBytes}, torch::kUInt8);
  auto labels = torch::empty({n}, torch::kInt64);
  auto raw_acc = raw.accessor<std::uint8_t, 2>();
  auto label_acc = labels.accessor<std::int64_t, 1>();
  std::int64_t row = 0;
  for (const auto& file : files) {
    const auto bytes = read_batch_file(file);
    for (std::int64_t r = 0; r < kRecordsPerFile; ++r, ++row) {
      const auto* record = bytes.data() + r * kRecordBytes;
      label_acc[row] = record[0];
      std::copy(record + 1, record + kRecordBytes, &raw_acc[row][0]);
    }
  }
  ImageBatch batch;
  batch.pixels = (raw.to(torch::kFloat32) / 255.0f).reshape({n, 3, kCorpusSide, kCorpusSide});
  batch.labels = labels;
  batch.source_indices.resize(static_cast<std::size_t>(n));
  std::iota(batch.source_indices.begin(), batch.source_indices.end(), std::int64_t{0});
  return batch;
}

ImageBatch resize_batch(const ImageBatch& batch, std::int64_t side) {
  if (side < 1) throw std::invalid_argument("resize side must be >= 1");
  ImageBatch out = batch;
  if (batch.size() == 0) {
    out.pixels = torch::empty({0, 3, side, side}, torch::kFloat32);
    return out;
  }
  if (batch.pixels.size(2) == side && batch.pixels.size(3) == side) {
    out.pixels = batch.pixels.clone();
    return out;
  }
  namespace F = torch::nn::functional;
  torch::NoGradGuard no_grad;
  out.pixels = F::interpolate(batch.pixels, F::InterpolateFuncOptions()
                                                .size(std::vector<std::int64_t>{side, side})
                                                .mode(torch::kBilinear)
                                                .align_corners(false))
                   .contiguous();
  return out;
}

ImageBatch subset(const ImageBatch& batch, std::span<const std::int64_t> indices) {
  std::unordered_set<std::int64_t> seen;
  for (const auto i : indices) {
    if (i < 0 || i >= batch.size()) {
      throw std::out_of_range("subset index " + std::to_string(i) + " outside [0, " +
                              std::to_string(batch.size()) + ")");
    }
    if (!seen.insert(i).second) {
      throw std::invalid_argument("subset index " + std::to_string(i) + " repeated");
    }
  }
  ImageBatch out;
  const auto index =
      torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kInt64);
  out.pixels = batch.pixels.index_select(0, index).contiguous();
  out.labels = batch.labels.index_select(0, index).contiguous();
  out.encrypted_with = batch.encrypted_with;
  out.source_indices.reserve(indices.size());
  for (const auto i : indices) {
    out.source_indices.push_back(batch.source_indices.empty()
                                     ? i
                                     : batch.source_indices[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<std::int64_t> class_histogram(const torch::Tensor& labels) {
  std::vector<std::int64_t> counts(kNumClasses, 0);
  const auto contiguous = labels.to(torch::kInt64).contiguous();
  const auto* data = contiguous.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < contiguous.numel(); ++i) {
    const auto c = data[i];
    if (c >= static_cast<std::int64_t>(counts.size())) counts.resize(static_cast<std::size_t>(c + 1), 0);
    ++counts[static_cast<std::size_t>(c)];
  }
  return counts;
}

std::vector<std::int64_t> stratified_indices(const torch::Tensor& labels, std::int64_t per_class,
                                             std::uint64_t seed) {
  if (per_class < 0) throw std::invalid_argument("per_class must be >= 0");
  const auto contiguous = labels.to(torch::kInt64).contiguous();
  const auto* data = contiguous.data_ptr<std::int64_t>();
  const auto n = contiguous.numel();
  std::vector<std::vector<std::int64_t>> by_class(kNumClasses);
  for (std::int64_t i = 0; i < n; ++i) by_class.at(static_cast<std::size_t>(data[i])).push_back(i);

  std::vector<std::int64_t> chosen;
  Xoshiro256 rng(seed);
  for (auto& members : by_class) {
    if (per_class > static_cast<std::int64_t>(members.size())) {
      throw std::invalid_argument("stratified subset asks for " + std::to_string(per_class) +
                                  " examples of a class that has " +
                                  std::to_string(members.size()));
    }
    if (per_class < static_cast<std::int64_t>(members.size())) {
      shuffle(std::span<std::int64_t>(members), rng);
    }
    chosen.insert(chosen.end(), members.begin(), members.begin() + per_class);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

void write_index_file(const std::filesystem::path& path, std::span<const std::int64_t> indices,
                      const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw StoreError("cannot write index file " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  for (const auto i : indices) out << i << '\n';
}

std::vector<std::int64_t> read_index_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StoreError("cannot read index file " + path.string());
  std::vector<std::int64_t> indices;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    std::size_t used = 0;
    try {
      indices.push_back(std::stoll(line, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != line.size()) {
      throw StoreError("index file " + path.string() + " line " + std::to_string(line_no) +
                       " is not an integer");
    }
  }
  return indices;
}

torch::Tensor augment_flip_crop(const torch::Tensor& pixels, Xoshiro256& rng) {
  constexpr std::int64_t kPad = 4;
  namespace F = torch::nn::functional;
  const auto side = pixels.size(2);
  const auto padded =
      F::pad(pixels, F::PadFuncOptions({kPad, kPad, kPad, kPad}).mode(torch::kReflect));
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(pixels.size(0)));
  for (std::int64_t i = 0; i < pixels.size(0); ++i) {
    const bool flip = rng.coin();
    const auto dy = rng.between(0, 2 * kPad);
    const auto dx = rng.between(0, 2 * kPad);
    auto img = padded[i].narrow(1, dy, side).narrow(2, dx, side);
    if (flip) img = img.flip({2});
    out.push_back(img);
  }
  return torch::stack(out).contiguous();
}

torch::Tensor augment_cutout(const torch::Tensor& pixels, std::int64_t side, Xoshiro256& rng) {
  auto out = pixels.clone();
  const auto h = pixels.size(2);
  const auto w = pixels.size(3);
  for (std::int64_t i = 0; i < pixels.size(0); ++i) {
    const auto cy = rng.between(0, h - 1);
    const auto cx = rng.between(0, w - 1);
    const auto y0 = std::max<std::int64_t>(cy - side / 2, 0);
    const auto x0 = std::max<std::int64_t>(cx - side / 2, 0);
    const auto y1 = std::min<std::int64_t>(cy + (side + 1) / 2, h);
    const auto x1 = std::min<std::int64_t>(cx + (side + 1) / 2, w);
    out[i].narrow(1, y0, y1 - y0).narrow(2, x0, x1 - x0).zero_();
  }
  return out;
}

}  // namespace advtransfer
