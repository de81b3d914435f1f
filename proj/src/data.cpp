#include "qcnn/data.hpp"

#include "qcnn/errors.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <numeric>
#include <sstream>

namespace qcnn {
namespace fs = std::filesystem;
namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

void require_length(std::span<const std::uint8_t> bytes, std::size_t needed,
                    const std::string& source) {
  if (bytes.size() < needed)
    throw FormatError(source + ": truncated file, expected at least " + std::to_string(needed) +
                      " bytes, got " + std::to_string(bytes.size()));
}

void check_magic(std::span<const std::uint8_t> bytes, std::uint32_t expected,
                 const std::string& source) {
  require_length(bytes, 4, source);
  const auto magic = read_be32(bytes, 0);
  if (magic != expected)
    throw FormatError(source + ": bad magic " + hex32(magic) + " at offset 0 (expected " +
                      hex32(expected) + ")");
}

fs::path find_file(const fs::path& dir, std::initializer_list<const char*> names) {
  for (const char* n : names) {
    for (const char* suffix : {"", ".gz"}) {
      fs::path p = dir / (std::string(n) + suffix);
      if (fs::exists(p)) return p;
    }
  }
  return {};
}

std::string mnist_instructions(const fs::path& dir) {
  return "MNIST files not found in " + dir.string() +
         ". Place train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte and "
         "t10k-labels-idx1-ubyte (raw or .gz) there; they are published at "
         "http://yann.lecun.com/exdb/mnist/ and mirrored by most ML toolkits. "
         "Set --data-dir or QCNN_DATA_DIR to point at the directory.";
}

std::string cifar_instructions(const fs::path& dir) {
  return "CIFAR-10 binary batches not found in " + dir.string() +
         ". Download cifar-10-binary.tar.gz from https://www.cs.toronto.edu/~kriz/cifar.html, "
         "extract it, and point --data-dir or QCNN_DATA_DIR at the directory containing "
         "data_batch_1.bin ... data_batch_5.bin and test_batch.bin.";
}

Dataset make_dataset(DatasetName name, Split split, int count, int channels, int height, int width,
                     const std::uint8_t* pixels, const std::uint8_t* labels,
                     const Normalization& norm) {
  Dataset d;
  d.name = name;
  d.split = split;
  d.images = Tensor({count, channels, height, width});
  d.labels.resize(static_cast<std::size_t>(count));
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  auto& v = d.images.values();
  for (int i = 0; i < count; ++i) {
    d.labels[static_cast<std::size_t>(i)] = labels[i];
    for (int c = 0; c < channels; ++c) {
      const float m = norm.mean[static_cast<std::size_t>(c)];
      const float s = norm.std[static_cast<std::size_t>(c)];
      const std::size_t base = (static_cast<std::size_t>(i) * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p)
        v[static_cast<Eigen::Index>(base + p)] = (static_cast<float>(pixels[base + p]) / 255.0f - m) / s;
    }
  }
  return d;
}

}  // namespace

std::string_view to_string(DatasetName name) {
  return name == DatasetName::MNIST ? "mnist" : "cifar10";
}

DatasetName parse_dataset(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "mnist") return DatasetName::MNIST;
  if (s == "cifar10" || s == "cifar-10") return DatasetName::CIFAR10;
  throw ConfigError("unknown dataset '" + std::string(name) + "' (expected mnist or cifar10)");
}

Dataset Dataset::head(int count) const {
  const int n = std::min(count, size());
  Dataset d;
  d.name = name;
  d.split = split;
  d.num_classes = num_classes;
  Shape shape = images.shape();
  shape[0] = n;
  const auto per = static_cast<Eigen::Index>(images.size() / static_cast<std::size_t>(size()));
  d.images = Tensor(shape, ArrayXs(images.values().head(per * n)));
  d.labels.assign(labels.begin(), labels.begin() + n);
  return d;
}

Normalization mnist_normalization() { return {{0.1307f}, {0.3081f}}; }

Normalization cifar10_normalization() {
  return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
}

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source) {
  check_magic(bytes, kIdxImageMagic, source);
  require_length(bytes, 16, source);
  IdxImages out;
  out.count = static_cast<int>(read_be32(bytes, 4));
  out.rows = static_cast<int>(read_be32(bytes, 8));
  out.cols = static_cast<int>(read_be32(bytes, 12));
  const std::size_t payload = static_cast<std::size_t>(out.count) * out.rows * out.cols;
  require_length(bytes, 16 + payload, source);
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
  return out;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes,
                                           const std::string& source) {
  check_magic(bytes, kIdxLabelMagic, source);
  require_length(bytes, 8, source);
  const std::size_t count = read_be32(bytes, 4);
  require_length(bytes, 8 + count, source);
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

CifarRecords parse_cifar_records(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError(source + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of the 3073-byte record size");
  const std::size_t count = bytes.size() / kCifarRecordBytes;
  CifarRecords out;
  out.labels.resize(count);
  out.pixels.resize(count * (kCifarRecordBytes - 1));
  for (std::size_t i = 0; i < count; ++i) {
    const auto* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9)
      throw FormatError(source + ": label " + std::to_string(rec[0]) + " out of range at offset " +
                        std::to_string(i * kCifarRecordBytes));
    out.labels[i] = rec[0];
    std::copy(rec + 1, rec + kCifarRecordBytes, out.pixels.begin() + static_cast<std::ptrdiff_t>(i * (kCifarRecordBytes - 1)));
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> chunk(1 << 20);
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw FormatError("read error in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return out;
}

std::pair<Dataset, Dataset> load_mnist(const fs::path& dir) {
  const auto train_images = find_file(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
  const auto train_labels = find_file(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
  const auto test_images = find_file(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
  const auto test_labels = find_file(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
  if (train_images.empty() || train_labels.empty() || test_images.empty() || test_labels.empty())
    throw DataMissingError(mnist_instructions(dir));

  const auto norm = mnist_normalization();
  auto load_split = [&](const fs::path& img_path, const fs::path& lbl_path, Split split) {
    const auto img_bytes = read_file_bytes(img_path);
    const auto lbl_bytes = read_file_bytes(lbl_path);
    const auto images = parse_idx_images(img_bytes, img_path.string());
    const auto labels = parse_idx_labels(lbl_bytes, lbl_path.string());
    if (labels.size() != static_cast<std::size_t>(images.count))
      throw FormatError("MNIST consistency error: " + std::to_string(images.count) +
                        " images but " + std::to_string(labels.size()) + " labels (" +
                        img_path.filename().string() + ", " + lbl_path.filename().string() + ")");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] > 9)
        throw FormatError(lbl_path.string() + ": label out of range at offset " +
                          std::to_string(8 + i));
    return make_dataset(DatasetName::MNIST, split, images.count, 1, images.rows, images.cols,
                        images.pixels.data(), labels.data(), norm);
  };
  return {load_split(train_images, train_labels, Split::Train),
          load_split(test_images, test_labels, Split::Test)};
}

std::pair<Dataset, Dataset> load_cifar10(const fs::path& dir) {
  fs::path root = dir;
  if (!fs::exists(root / "data_batch_1.bin") && fs::exists(root / "cifar-10-batches-bin"))
    root = root / "cifar-10-batches-bin";
  std::vector<fs::path> train_files;
  for (int i = 1; i <= 5; ++i) train_files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  const fs::path test_file = root / "test_batch.bin";
  for (const auto& p : train_files)
    if (!fs::exists(p)) throw DataMissingError(cifar_instructions(dir));
  if (!fs::exists(test_file)) throw DataMissingError(cifar_instructions(dir));

  const auto norm = cifar10_normalization();
  auto load_files = [&](const std::vector<fs::path>& files, Split split) {
    CifarRecords all;
    for (const auto& p : files) {
      auto rec = parse_cifar_records(read_file_bytes(p), p.string());
      all.labels.insert(all.labels.end(), rec.labels.begin(), rec.labels.end());
      all.pixels.insert(all.pixels.end(), rec.pixels.begin(), rec.pixels.end());
    }
    return make_dataset(DatasetName::CIFAR10, split, static_cast<int>(all.labels.size()), 3, 32, 32,
                        all.pixels.data(), all.labels.data(), norm);
  };
  return {load_files(train_files, Split::Train), load_files({test_file}, Split::Test)};
}

std::pair<Dataset, Dataset> load_dataset(DatasetName name, const fs::path& dir) {
  return name == DatasetName::MNIST ? load_mnist(dataset_dir(dir, name))
                                    : load_cifar10(dataset_dir(dir, name));
}

fs::path resolve_data_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("QCNN_DATA_DIR"); env && *env) return env;
  return "data";
}

fs::path dataset_dir(const fs::path& root, DatasetName name) {
  const fs::path sub = root / std::string(to_string(name));
  return fs::is_directory(sub) ? sub : root;
}

void flip_horizontal(std::span<float> image, int channels, int height, int width) {
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y) {
      auto row = image.subspan(static_cast<std::size_t>((c * height + y) * width),
                               static_cast<std::size_t>(width));
      std::reverse(row.begin(), row.end());
    }
}

void crop_from_padded(std::span<float> image, int channels, int height, int width, int pad, int dy,
                      int dx) {
  std::vector<float> src(image.begin(), image.end());
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const int sy = y + dy - pad, sx = x + dx - pad;
        const bool inside = sy >= 0 && sy < height && sx >= 0 && sx < width;
        image[static_cast<std::size_t>((c * height + y) * width + x)] =
            inside ? src[static_cast<std::size_t>((c * height + sy) * width + sx)] : 0.0f;
      }
}

void augment(Tensor& batch, DatasetName dataset, std::mt19937_64& rng) {
  if (dataset != DatasetName::CIFAR10) return;
  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  std::uniform_int_distribution<int> offset(0, 8);
  std::bernoulli_distribution flip(0.5);
  for (int i = 0; i < n; ++i) {
    auto image = batch.span().subspan(static_cast<std::size_t>(i) * per, per);
    crop_from_padded(image, c, h, w, 4, offset(rng), offset(rng));
    if (flip(rng)) flip_horizontal(image, c, h, w);
  }
}

BatchIterator::BatchIterator(const Dataset& dataset, int batch_size, std::uint64_t seed,
                             bool shuffle, bool augment)
    : dataset_(&dataset), batch_size_(batch_size), seed_(seed), shuffle_(shuffle), augment_(augment) {
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  start_epoch(0);
}

void BatchIterator::start_epoch(int epoch) {
  epoch_ = epoch;
  order_.resize(static_cast<std::size_t>(dataset_->size()));
  std::iota(order_.begin(), order_.end(), 0);
  if (!shuffle_) return;
  std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
  // Fisher-Yates with an explicit draw so the order only depends on mt19937_64.
  for (std::size_t i = order_.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(order_[i - 1], order_[j]);
  }
}

int BatchIterator::batch_count() const {
  return (dataset_->size() + batch_size_ - 1) / batch_size_;
}

Batch BatchIterator::batch(int index) const {
  const int begin = index * batch_size_;
  const int end = std::min(begin + batch_size_, dataset_->size());
  if (begin < 0 || begin >= end) throw ContractError("batch index out of range");
  const int count = end - begin;
  Shape shape = dataset_->images.shape();
  shape[0] = count;
  Batch b;
  b.images = make_tensor(shape);
  b.labels.resize(static_cast<std::size_t>(count));
  const auto per = static_cast<Eigen::Index>(dataset_->images.size() /
                                             static_cast<std::size_t>(dataset_->size()));
  for (int i = 0; i < count; ++i) {
    const int src = order_[static_cast<std::size_t>(begin + i)];
    b.images->values().segment(i * per, per) = dataset_->images.values().segment(src * per, per);
    b.labels[static_cast<std::size_t>(i)] = dataset_->labels[static_cast<std::size_t>(src)];
  }
  if (augment_) {
    std::mt19937_64 rng(seed_ ^ (static_cast<std::uint64_t>(epoch_) << 32) ^
                        static_cast<std::uint64_t>(index));
    augment(*b.images, dataset_->name, rng);
  }
  return b;
}

}  // namespace qcnn
