#pragma once

#include "qcnn/data.hpp"
#include "qcnn/model_zoo.hpp"
#include "qcnn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace qcnn {

using Word = std::uint64_t;
inline constexpr int kWordBits = 64;

inline std::size_t words_for(std::size_t bits) { return (bits + kWordBits - 1) / kWordBits; }

// Bit i set <=> element i is +1. Unused bits of the last word are zero.
struct PackedTensor {
  std::vector<Word> words;
  std::size_t logical_len = 0;
  Shape shape;
};

// Requires every element to be exactly -1 or +1.
PackedTensor pack(const Tensor& x);
PackedTensor pack(std::span<const float> x, Shape shape);
// Packs sign(x) with sign(0) = +1; never fails.
PackedTensor pack_signs(std::span<const float> x, Shape shape);
Tensor unpack(const PackedTensor& p);

// n - 2 popcount(a XOR b) over n live bits; equals the +-1 dot product.
int xnor_popcount_dot(const PackedTensor& a, const PackedTensor& b);
int xnor_popcount_dot(std::span<const Word> a, std::span<const Word> b, std::size_t n);

enum class StageKind : std::uint8_t {
  Conv = 1,       // float or binary weights
  Linear = 2,
  BatchNorm = 3,  // eval-mode, kept in float
  Threshold = 4,  // eval-mode BN folded into the following sign()
  MaxPool = 5,
  AvgPool = 6,
  Flatten = 7,
  ReLU = 8,
  HardTanh = 9,
};

enum class InputQuant : std::uint8_t { None = 0, Sign = 1, Linear = 2, DoReFa = 3 };

struct Stage {
  StageKind kind = StageKind::Flatten;

  // Conv / Linear
  Shape weight_shape;  // [F,C,k,k] or [K,D]
  int stride = 1, padding = 0;
  bool binary = false;           // weights packed, one word-aligned row per output channel
  std::vector<PackedTensor> rows;
  std::vector<float> weights;    // full-precision weights when !binary
  std::vector<float> alpha;      // per-channel scale, empty when absent
  std::vector<float> bias;
  InputQuant input = InputQuant::None;
  int input_bits = 32;
  float input_lo = 0, input_hi = 0;

  // BatchNorm
  std::vector<float> gamma, beta, mean, var;
  float epsilon = 1e-5f;

  // Threshold: +1 where x >= t (direction +1), x <= t (direction -1), or
  // always/never (direction 0, constant sign in `threshold`).
  std::vector<float> threshold;
  std::vector<std::int8_t> direction;

  // Pools
  int kernel = 0;

  int out_channels() const { return weight_shape.empty() ? 0 : weight_shape[0]; }
  std::size_t fan_in() const;
};

struct PayloadStats {
  std::size_t binary_weights = 0;   // number of packed weights
  std::size_t packed_bits = 0;      // logical bits holding them
  std::size_t float_weights = 0;    // exempt full-precision conv/fc weights
  double packed_bytes() const { return static_cast<double>(packed_bits) / 8.0; }
  // Bytes those same binary weights take as float32.
  double float_equivalent_bytes() const { return 4.0 * static_cast<double>(binary_weights); }
  // All conv/fc weight bytes: packed plus exempt float.
  double total_weight_bytes() const { return packed_bytes() + 4.0 * static_cast<double>(float_weights); }
};

inline constexpr std::uint8_t kBinaryModelVersion = 1;

class BinaryModel {
 public:
  std::string model_name;
  int num_classes = 10;
  std::vector<Stage> stages;

  Tensor forward(const Tensor& x) const;
  PayloadStats payload() const;

  std::vector<std::uint8_t> serialize() const;
  static BinaryModel deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static BinaryModel load(const std::filesystem::path& path);
};

// Packed patches for a binary conv: for every (image, oy, ox), the sign bits
// of the C*k*k receptive field and a mask of the positions inside the image.
struct PackedPatches {
  int n = 0, oh = 0, ow = 0;
  std::size_t patch_bits = 0;
  std::size_t words_per_patch = 0;
  std::vector<Word> bits;
  std::vector<Word> mask;
  std::vector<int> valid;  // popcount of each mask
};

PackedPatches pack_patches(const Tensor& input, int kernel, int stride, int padding);

// out[n,f,oy,ox] = alpha[f] * (valid - 2 popcount((patch XOR filter) AND mask)) + bias[f]
Tensor binary_conv2d(const PackedPatches& patches, const Stage& layer);
Tensor binary_conv2d(const Tensor& input, const Stage& layer);
Tensor binary_linear(const Tensor& input, const Stage& layer);

// Converts a network whose weight-quantized layers are all 1-bit. Only
// sequential (LeNet-style) bodies are supported.
BinaryModel export_binary_model(Network& network);

double evaluate_binary(const BinaryModel& model, const Dataset& dataset, int k = 1,
                       int batch_size = 500);

}  // namespace qcnn
