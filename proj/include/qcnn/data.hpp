#pragma once

#include "qcnn/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qcnn {

enum class DatasetName { MNIST, CIFAR10 };
enum class Split { Train, Test };

std::string_view to_string(DatasetName name);
DatasetName parse_dataset(std::string_view name);

// Raised when dataset files are absent; the message carries retrieval
// instructions. The CLI maps it to exit code 3.
class DataMissingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  DatasetName name = DatasetName::MNIST;
  Split split = Split::Train;
  Tensor images;            // [N,C,H,W], normalized
  std::vector<int> labels;  // N class ids
  int num_classes = 10;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
  // First `count` samples (all when count exceeds the size).
  Dataset head(int count) const;
};

struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;
};

Normalization mnist_normalization();    // 0.1307 / 0.3081
Normalization cifar10_normalization();  // (0.4914, 0.4822, 0.4465) / (0.2470, 0.2435, 0.2616)

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kCifarRecordBytes = 3073;

struct IdxImages {
  int count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

// Big-endian IDX parsers; `source` names the input in error messages.
IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source = "idx");
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes,
                                           const std::string& source = "idx");

struct CifarRecords {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // count * 3072, channel-major per record
};
CifarRecords parse_cifar_records(std::span<const std::uint8_t> bytes,
                                 const std::string& source = "cifar");

// Reads a raw or gzip-compressed file.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

std::pair<Dataset, Dataset> load_mnist(const std::filesystem::path& dir);
std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir);
std::pair<Dataset, Dataset> load_dataset(DatasetName name, const std::filesystem::path& dir);

// Data directory resolution: explicit flag, then QCNN_DATA_DIR, then ./data.
std::filesystem::path resolve_data_dir(const std::string& flag_value);
// Per-dataset subdirectory under the data root when present.
std::filesystem::path dataset_dir(const std::filesystem::path& root, DatasetName name);

// Augmentation on one [C,H,W] image stored at `image`.
void flip_horizontal(std::span<float> image, int channels, int height, int width);
// Crop of the image zero-padded by `pad` on each side, taken at (dy, dx) in
// padded coordinates; (pad, pad) reproduces the input.
void crop_from_padded(std::span<float> image, int channels, int height, int width, int pad, int dy,
                      int dx);
// CIFAR-10: 4-pixel pad-crop and horizontal flip with p = 0.5. MNIST: no-op.
void augment(Tensor& batch, DatasetName dataset, std::mt19937_64& rng);

struct Batch {
  TensorPtr images;
  std::vector<int> labels;
};

// Seed-deterministic shuffled minibatches; every epoch is a permutation of
// all sample indices.
class BatchIterator {
 public:
  BatchIterator(const Dataset& dataset, int batch_size, std::uint64_t seed, bool shuffle = true,
                bool augment = false);

  void start_epoch(int epoch);
  int batch_count() const;
  Batch batch(int index) const;
  const std::vector<int>& order() const { return order_; }

 private:
  const Dataset* dataset_;
  int batch_size_;
  std::uint64_t seed_;
  bool shuffle_, augment_;
  int epoch_ = 0;
  std::vector<int> order_;
};

}  // namespace qcnn
