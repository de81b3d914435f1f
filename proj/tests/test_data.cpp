#include "doctest.h"

#include "qcnn/data.hpp"
#include "qcnn/errors.hpp"
#include "support.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>

using namespace qcnn;
using namespace qcnn::testing;
namespace fs = std::filesystem;

namespace {

using Bytes = std::vector<std::uint8_t>;

void put_be32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

Bytes idx_images(int count, int rows, int cols, std::uint32_t magic = kIdxImageMagic) {
  Bytes b;
  put_be32(b, magic);
  put_be32(b, static_cast<std::uint32_t>(count));
  put_be32(b, static_cast<std::uint32_t>(rows));
  put_be32(b, static_cast<std::uint32_t>(cols));
  for (int i = 0; i < count * rows * cols; ++i) b.push_back(static_cast<std::uint8_t>((i * 37) % 256));
  return b;
}

Bytes idx_labels(int count, std::uint32_t magic = kIdxLabelMagic) {
  Bytes b;
  put_be32(b, magic);
  put_be32(b, static_cast<std::uint32_t>(count));
  for (int i = 0; i < count; ++i) b.push_back(static_cast<std::uint8_t>(i % 10));
  return b;
}

Bytes cifar_records(int count) {
  Bytes b;
  for (int r = 0; r < count; ++r) {
    b.push_back(static_cast<std::uint8_t>(r % 10));
    for (int i = 0; i < 3072; ++i) b.push_back(static_cast<std::uint8_t>((r + i) % 256));
  }
  return b;
}

void write(const fs::path& p, const Bytes& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void write_gz(const fs::path& p, const Bytes& b) {
  gzFile f = gzopen(p.string().c_str(), "wb");
  REQUIRE(f);
  gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
  gzclose(f);
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("qcnn_data_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Dataset tiny_dataset(int n, int c, int h, int w) {
  Dataset d;
  d.images = Tensor({n, c, h, w});
  for (std::size_t i = 0; i < d.images.size(); ++i) d.images[i] = static_cast<float>(i);
  d.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) d.labels[static_cast<std::size_t>(i)] = i % 10;
  return d;
}

}  // namespace

TEST_CASE("idx parsing") {
  const auto imgs = parse_idx_images(idx_images(3, 4, 5));
  CHECK(imgs.count == 3);
  CHECK(imgs.rows == 4);
  CHECK(imgs.cols == 5);
  CHECK(imgs.pixels.size() == 60);
  CHECK(imgs.pixels[1] == 37);
  const auto labels = parse_idx_labels(idx_labels(12));
  CHECK(labels.size() == 12);
  CHECK(labels[11] == 1);

  // Label magic on an image file.
  try {
    parse_idx_images(idx_images(1, 2, 2, kIdxLabelMagic), "imgs");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_idx_labels(idx_labels(2, kIdxImageMagic)), FormatError);
  Bytes cut = idx_images(2, 3, 3);
  cut.resize(cut.size() - 1);
  CHECK_THROWS_AS(parse_idx_images(cut), FormatError);
  CHECK_THROWS_AS(parse_idx_labels(Bytes{0, 0, 8}), FormatError);
}

TEST_CASE("cifar parsing") {
  CHECK(kCifarRecordBytes == 3073);
  const auto recs = parse_cifar_records(cifar_records(4));
  CHECK(recs.labels.size() == 4);
  CHECK(recs.pixels.size() == 4 * 3072);
  CHECK(recs.labels[3] == 3);
  CHECK(recs.pixels[3072] == 1);
  Bytes bad = cifar_records(2);
  bad.pop_back();
  CHECK_THROWS_AS(parse_cifar_records(bad), FormatError);
  Bytes label = cifar_records(1);
  label[0] = 10;
  CHECK_THROWS_AS(parse_cifar_records(label), FormatError);
}

TEST_CASE("mnist loader on synthetic files") {
  TempDir dir;
  SUBCASE("raw and gzip files") {
    write(dir.path / "train-images-idx3-ubyte", idx_images(20, 28, 28));
    write(dir.path / "train-labels-idx1-ubyte", idx_labels(20));
    write_gz(dir.path / "t10k-images-idx3-ubyte.gz", idx_images(10, 28, 28));
    write_gz(dir.path / "t10k-labels-idx1-ubyte.gz", idx_labels(10));
    auto [train, test] = load_mnist(dir.path);
    CHECK(train.size() == 20);
    CHECK(test.size() == 10);
    CHECK(train.images.shape() == Shape{20, 1, 28, 28});
    // pixel 37 -> (37/255 - 0.1307) / 0.3081
    CHECK(train.images[1] == doctest::Approx((37.0 / 255 - 0.1307) / 0.3081).epsilon(1e-5));
    CHECK(test.split == Split::Test);
  }
  SUBCASE("count mismatch") {
    write(dir.path / "train-images-idx3-ubyte", idx_images(20, 28, 28));
    write(dir.path / "train-labels-idx1-ubyte", idx_labels(19));
    write(dir.path / "t10k-images-idx3-ubyte", idx_images(10, 28, 28));
    write(dir.path / "t10k-labels-idx1-ubyte", idx_labels(10));
    try {
      load_mnist(dir.path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("consistency") != std::string::npos);
    }
  }
  SUBCASE("missing files") {
    try {
      load_mnist(dir.path);
      FAIL("expected DataMissingError");
    } catch (const DataMissingError& e) {
      CHECK(std::string(e.what()).find("train-images") != std::string::npos);
    }
  }
}

TEST_CASE("cifar loader on synthetic files") {
  TempDir dir;
  const fs::path sub = dir.path / "cifar-10-batches-bin";
  fs::create_directories(sub);
  for (int i = 1; i <= 5; ++i) write(sub / ("data_batch_" + std::to_string(i) + ".bin"), cifar_records(20));
  write(sub / "test_batch.bin", cifar_records(10));
  auto [train, test] = load_cifar10(dir.path);
  CHECK(train.size() == 100);
  CHECK(test.size() == 10);
  CHECK(train.images.shape() == Shape{100, 3, 32, 32});
  std::vector<int> hist(10, 0);
  for (int l : train.labels) ++hist[static_cast<std::size_t>(l)];
  CHECK(std::all_of(hist.begin(), hist.end(), [](int h) { return h == 10; }));
  // record 0, channel 1 starts at pixel byte 1024 -> value 1024 % 256 = 0
  const auto norm = cifar10_normalization();
  CHECK(train.images[1024] == doctest::Approx((0.0 - norm.mean[1]) / norm.std[1]).epsilon(1e-5));
  fs::remove(sub / "test_batch.bin");
  CHECK_THROWS_AS(load_cifar10(dir.path), DataMissingError);
}

TEST_CASE("data directory resolution") {
  CHECK(resolve_data_dir("/x/y") == fs::path("/x/y"));
  const char* old = std::getenv("QCNN_DATA_DIR");
  const std::string saved = old ? old : "";
  setenv("QCNN_DATA_DIR", "/from/env", 1);
  CHECK(resolve_data_dir("") == fs::path("/from/env"));
  unsetenv("QCNN_DATA_DIR");
  CHECK(resolve_data_dir("") == fs::path("data"));
  if (old) setenv("QCNN_DATA_DIR", saved.c_str(), 1);
  CHECK(parse_dataset("CIFAR10") == DatasetName::CIFAR10);
  CHECK_THROWS_AS(parse_dataset("imagenet"), ConfigError);
}

TEST_CASE("augmentation identities") {
  std::mt19937_64 rng(41);
  std::vector<float> img(3 * 32 * 32);
  std::uniform_real_distribution<float> d(-1, 1);
  for (auto& v : img) v = d(rng);
  const auto orig = img;
  flip_horizontal(img, 3, 32, 32);
  CHECK(img != orig);
  CHECK(img[0] == orig[31]);
  flip_horizontal(img, 3, 32, 32);
  CHECK(img == orig);

  crop_from_padded(img, 3, 32, 32, 4, 4, 4);
  CHECK(img == orig);
  crop_from_padded(img, 3, 32, 32, 4, 0, 0);
  CHECK(img[0] == 0.0f);                     // top-left lands in padding
  CHECK(img[4 * 32 + 4] == orig[0]);         // shifted down-right by 4

  auto batch = random_tensor({4, 3, 32, 32}, rng);
  const Tensor before = *batch;
  augment(*batch, DatasetName::CIFAR10, rng);
  CHECK(batch->shape() == before.shape());
  auto mnist = random_tensor({4, 1, 28, 28}, rng);
  const Tensor mnist_before = *mnist;
  augment(*mnist, DatasetName::MNIST, rng);
  CHECK((mnist->values() == mnist_before.values()).all());
}

TEST_CASE("batch iterator") {
  const Dataset d = tiny_dataset(37, 1, 2, 2);
  BatchIterator it(d, 8, 5);
  it.start_epoch(0);
  CHECK(it.batch_count() == 5);
  std::vector<int> seen;
  for (int b = 0; b < it.batch_count(); ++b) {
    const auto batch = it.batch(b);
    CHECK(batch.images->dim(0) == static_cast<int>(batch.labels.size()));
    for (int i = 0; i < batch.images->dim(0); ++i) {
      // Pixel 0 of sample k holds 4k, so the sample id is recoverable.
      const int id = static_cast<int>((*batch.images)[static_cast<std::size_t>(i * 4)]) / 4;
      CHECK(batch.labels[static_cast<std::size_t>(i)] == id % 10);
      seen.push_back(id);
    }
  }
  std::sort(seen.begin(), seen.end());
  std::vector<int> all(37);
  std::iota(all.begin(), all.end(), 0);
  CHECK(seen == all);

  BatchIterator again(d, 8, 5);
  again.start_epoch(0);
  CHECK(again.order() == it.order());
  again.start_epoch(1);
  CHECK(again.order() != it.order());
  BatchIterator other(d, 8, 6);
  other.start_epoch(0);
  CHECK(other.order() != it.order());
  BatchIterator plain(d, 8, 5, false);
  plain.start_epoch(3);
  CHECK(plain.order() == all);
  CHECK_THROWS_AS(it.batch(5), ContractError);
  CHECK_THROWS_AS(BatchIterator(d, 0, 1), ConfigError);

  const Dataset h = d.head(10);
  CHECK(h.size() == 10);
  CHECK(h.images.shape() == Shape{10, 1, 2, 2});
}

TEST_CASE("real MNIST when available") {
  const auto dir = mnist_dir();
  if (dir.empty()) {
    MESSAGE("MNIST not found; set QCNN_DATA_DIR");
    return;
  }
  auto [train, test] = load_mnist(dir);
  CHECK(train.size() == 60000);
  CHECK(test.size() == 10000);
  CHECK(train.images.shape() == Shape{60000, 1, 28, 28});
  CHECK(std::all_of(train.labels.begin(), train.labels.end(), [](int l) { return l >= 0 && l < 10; }));
  CHECK(std::all_of(test.labels.begin(), test.labels.end(), [](int l) { return l >= 0 && l < 10; }));
  const auto& v = train.images.values();
  const double mean = v.cast<double>().mean();
  const double sd = std::sqrt((v.cast<double>() - mean).square().mean());
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(sd - 1.0) < 0.05);
}
