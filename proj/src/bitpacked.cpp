#include "qcnn/bitpacked.hpp"

#include "qcnn/errors.hpp"
#include "qcnn/graph.hpp"
#include "qcnn/ops.hpp"
#include "qcnn/quantizers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace qcnn {
namespace {

ArrayXs to_array(const std::vector<float>& v) {
  return Eigen::Map<const ArrayXs>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<float> to_vector(const ArrayXs& a) { return {a.data(), a.data() + a.size()}; }

TensorPtr as_tensor(Shape shape, const std::vector<float>& v) {
  return make_tensor(std::move(shape), to_array(v));
}

int out_extent(int in, int k, int stride, int pad, const char* axis) {
  const int span = in + 2 * pad - k;
  if (span < 0 || span % stride > pad + std::max(0, stride - k))
    throw ConfigError(std::string("binary_conv2d: non-integer output size along ") + axis);
  return span / stride + 1;
}

}  // namespace

PackedTensor pack(const Tensor& x) { return pack(x.span(), x.shape()); }

PackedTensor pack(std::span<const float> x, Shape shape) {
  PackedTensor p;
  p.logical_len = x.size();
  p.shape = std::move(shape);
  p.words.assign(words_for(x.size()), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] == 1.0f)
      p.words[i / kWordBits] |= Word{1} << (i % kWordBits);
    else if (x[i] != -1.0f)
      throw ContractError("pack: element " + std::to_string(i) + " is " + std::to_string(x[i]) +
                          ", expected -1 or +1");
  }
  return p;
}

PackedTensor pack_signs(std::span<const float> x, Shape shape) {
  PackedTensor p;
  p.logical_len = x.size();
  p.shape = std::move(shape);
  p.words.assign(words_for(x.size()), 0);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] >= 0.0f) p.words[i / kWordBits] |= Word{1} << (i % kWordBits);
  return p;
}

Tensor unpack(const PackedTensor& p) {
  ArrayXs values(static_cast<Eigen::Index>(p.logical_len));
  for (std::size_t i = 0; i < p.logical_len; ++i)
    values[static_cast<Eigen::Index>(i)] = (p.words[i / kWordBits] >> (i % kWordBits)) & 1 ? 1.0f : -1.0f;
  Shape shape = p.shape.empty() ? Shape{static_cast<int>(p.logical_len)} : p.shape;
  return Tensor(shape, std::move(values));
}

int xnor_popcount_dot(std::span<const Word> a, std::span<const Word> b, std::size_t n) {
  if (a.size() != b.size() || a.size() != words_for(n))
    throw DimensionError("xnor_popcount_dot: word counts differ (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
  int diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::popcount(a[i] ^ b[i]);
  return static_cast<int>(n) - 2 * diff;
}

int xnor_popcount_dot(const PackedTensor& a, const PackedTensor& b) {
  if (a.logical_len != b.logical_len)
    throw DimensionError("xnor_popcount_dot: lengths differ (" + std::to_string(a.logical_len) +
                         " vs " + std::to_string(b.logical_len) + ")");
  return xnor_popcount_dot(a.words, b.words, a.logical_len);
}

std::size_t Stage::fan_in() const {
  if (weight_shape.empty()) return 0;
  return numel(weight_shape) / static_cast<std::size_t>(weight_shape[0]);
}

PackedPatches pack_patches(const Tensor& input, int kernel, int stride, int padding) {
  if (input.rank() != 4) throw DimensionError("pack_patches: expected [N,C,H,W], got " + to_string(input.shape()));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  PackedPatches p;
  p.n = n;
  p.oh = out_extent(h, kernel, stride, padding, "axis 2 (height)");
  p.ow = out_extent(w, kernel, stride, padding, "axis 3 (width)");
  p.patch_bits = static_cast<std::size_t>(c) * kernel * kernel;
  p.words_per_patch = words_for(p.patch_bits);
  const std::size_t count = static_cast<std::size_t>(n) * p.oh * p.ow;
  p.bits.assign(count * p.words_per_patch, 0);
  p.mask.assign(count * p.words_per_patch, 0);
  p.valid.assign(count, 0);
  const float* x = input.values().data();
  std::size_t idx = 0;
  for (int ni = 0; ni < n; ++ni)
    for (int oy = 0; oy < p.oh; ++oy)
      for (int ox = 0; ox < p.ow; ++ox, ++idx) {
        Word* bits = p.bits.data() + idx * p.words_per_patch;
        Word* mask = p.mask.data() + idx * p.words_per_patch;
        std::size_t b = 0;
        int valid = 0;
        for (int ci = 0; ci < c; ++ci)
          for (int ki = 0; ki < kernel; ++ki)
            for (int kj = 0; kj < kernel; ++kj, ++b) {
              const int iy = oy * stride + ki - padding, ix = ox * stride + kj - padding;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              const Word bit = Word{1} << (b % kWordBits);
              mask[b / kWordBits] |= bit;
              ++valid;
              const float v = x[((static_cast<std::size_t>(ni) * c + ci) * h + iy) * w + ix];
              if (v >= 0.0f) bits[b / kWordBits] |= bit;
            }
        p.valid[idx] = valid;
      }
  return p;
}

Tensor binary_conv2d(const PackedPatches& patches, const Stage& layer) {
  if (!layer.binary || layer.kind != StageKind::Conv)
    throw ContractError("binary_conv2d: layer does not hold packed conv weights");
  const int f = layer.out_channels();
  if (layer.fan_in() != patches.patch_bits)
    throw DimensionError("binary_conv2d: patch has " + std::to_string(patches.patch_bits) +
                         " bits, filters have " + std::to_string(layer.fan_in()));
  const std::size_t plane = static_cast<std::size_t>(patches.oh) * patches.ow;
  Tensor out({patches.n, f, patches.oh, patches.ow});
  float* o = out.values().data();
  const std::size_t wpp = patches.words_per_patch;
  for (int ni = 0; ni < patches.n; ++ni)
    for (int fi = 0; fi < f; ++fi) {
      const Word* filt = layer.rows[static_cast<std::size_t>(fi)].words.data();
      const float a = layer.alpha.empty() ? 1.0f : layer.alpha[static_cast<std::size_t>(fi)];
      const float bias = layer.bias.empty() ? 0.0f : layer.bias[static_cast<std::size_t>(fi)];
      for (std::size_t pi = 0; pi < plane; ++pi) {
        const std::size_t idx = static_cast<std::size_t>(ni) * plane + pi;
        const Word* bits = patches.bits.data() + idx * wpp;
        const Word* mask = patches.mask.data() + idx * wpp;
        int diff = 0;
        for (std::size_t k = 0; k < wpp; ++k) diff += std::popcount((bits[k] ^ filt[k]) & mask[k]);
        float v = static_cast<float>(patches.valid[idx] - 2 * diff);
        if (!layer.alpha.empty()) v *= a;
        if (!layer.bias.empty()) v += bias;
        o[(static_cast<std::size_t>(ni) * f + fi) * plane + pi] = v;
      }
    }
  return out;
}

Tensor binary_conv2d(const Tensor& input, const Stage& layer) {
  if (input.rank() != 4 || input.dim(1) != layer.weight_shape.at(1))
    throw DimensionError("binary_conv2d: axis 1 (channels) mismatch: input " + to_string(input.shape()) +
                         ", filters " + to_string(layer.weight_shape));
  return binary_conv2d(pack_patches(input, layer.weight_shape[2], layer.stride, layer.padding), layer);
}

Tensor binary_linear(const Tensor& input, const Stage& layer) {
  if (!layer.binary || layer.kind != StageKind::Linear)
    throw ContractError("binary_linear: layer does not hold packed linear weights");
  const int n = input.dim(0), d = static_cast<int>(input.size()) / std::max(1, input.dim(0));
  const int k = layer.out_channels();
  if (static_cast<std::size_t>(d) != layer.fan_in())
    throw DimensionError("binary_linear: axis 1 mismatch: input has " + std::to_string(d) +
                         " features, weights expect " + std::to_string(layer.fan_in()));
  Tensor out({n, k});
  for (int ni = 0; ni < n; ++ni) {
    const auto row = pack_signs(input.span().subspan(static_cast<std::size_t>(ni) * d, static_cast<std::size_t>(d)), {d});
    for (int ki = 0; ki < k; ++ki) {
      float v = static_cast<float>(xnor_popcount_dot(row, layer.rows[static_cast<std::size_t>(ki)]));
      if (!layer.alpha.empty()) v *= layer.alpha[static_cast<std::size_t>(ki)];
      if (!layer.bias.empty()) v += layer.bias[static_cast<std::size_t>(ki)];
      out[static_cast<std::size_t>(ni) * k + ki] = v;
    }
  }
  return out;
}

namespace {

TensorPtr quantize_stage_input(const Stage& s, const TensorPtr& x) {
  switch (s.input) {
    case InputQuant::None:
      return x;
    case InputQuant::Sign:
      return make_tensor(x->shape(), ArrayXs(quant::sign_binarize(x->values())));
    case InputQuant::Linear:
      return make_tensor(x->shape(),
                         ArrayXs(quant::linear_quantize(x->values(), s.input_bits, s.input_lo, s.input_hi)));
    case InputQuant::DoReFa:
      return make_tensor(x->shape(),
                         ArrayXs(quant::dorefa_activation_quantize(x->values(), s.input_bits)));
  }
  return x;
}

TensorPtr unpacked_weights(const Stage& s) {
  ArrayXs values(static_cast<Eigen::Index>(numel(s.weight_shape)));
  const auto fan = static_cast<Eigen::Index>(s.fan_in());
  for (std::size_t r = 0; r < s.rows.size(); ++r)
    values.segment(static_cast<Eigen::Index>(r) * fan, fan) = unpack(s.rows[r]).values();
  return make_tensor(s.weight_shape, std::move(values));
}

// Mirrors QuantLayer::forward: per-channel scale after the product, then bias.
TensorPtr weighted_stage(const Stage& s, const TensorPtr& x) {
  Graph g(false);
  if (s.binary && s.input == InputQuant::Sign) {
    if (s.kind == StageKind::Conv) return std::make_shared<Tensor>(binary_conv2d(*x, s));
    return std::make_shared<Tensor>(binary_linear(*x, s));
  }
  const auto xq = quantize_stage_input(s, x);
  const auto w = s.binary ? unpacked_weights(s) : as_tensor(s.weight_shape, s.weights);
  const auto bias = s.bias.empty() ? nullptr : as_tensor({static_cast<int>(s.bias.size())}, s.bias);
  auto apply = [&](const TensorPtr& b) {
    return s.kind == StageKind::Conv ? conv2d(g, xq, w, b, s.stride, s.padding) : linear(g, xq, w, b);
  };
  if (s.alpha.empty()) return apply(bias);
  auto y = scale_channels(g, apply(nullptr), to_array(s.alpha));
  return bias ? add_channel_bias(g, y, bias) : y;
}

TensorPtr threshold_stage(const Stage& s, const TensorPtr& x) {
  const int n = x->dim(0), c = x->dim(1);
  const int inner = static_cast<int>(x->size()) / (n * c);
  auto out = make_tensor(x->shape());
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float t = s.threshold[static_cast<std::size_t>(ci)];
      const int dir = s.direction[static_cast<std::size_t>(ci)];
      const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * inner;
      for (int i = 0; i < inner; ++i) {
        const float v = (*x)[off + i];
        const bool pos = dir > 0 ? v >= t : dir < 0 ? v <= t : t >= 0;
        (*out)[off + i] = pos ? 1.0f : -1.0f;
      }
    }
  return out;
}

}  // namespace

Tensor BinaryModel::forward(const Tensor& x) const {
  auto cur = std::make_shared<Tensor>(x);
  Graph g(false);
  for (const auto& s : stages) {
    switch (s.kind) {
      case StageKind::Conv:
      case StageKind::Linear:
        cur = weighted_stage(s, cur);
        break;
      case StageKind::BatchNorm: {
        const int c = static_cast<int>(s.gamma.size());
        BatchNormBuffers bn{as_tensor({c}, s.gamma), as_tensor({c}, s.beta), as_tensor({c}, s.mean),
                            as_tensor({c}, s.var), s.epsilon, 0.1f};
        cur = batch_norm(g, cur, bn, false);
        break;
      }
      case StageKind::Threshold:
        cur = threshold_stage(s, cur);
        break;
      case StageKind::MaxPool:
      case StageKind::AvgPool:
        cur = pool2d(g, cur, s.kind == StageKind::MaxPool ? PoolKind::Max : PoolKind::Avg, s.kernel, s.stride);
        break;
      case StageKind::Flatten:
        cur = flatten(g, cur);
        break;
      case StageKind::ReLU:
        cur = relu(g, cur);
        break;
      case StageKind::HardTanh:
        cur = hardtanh(g, cur);
        break;
    }
  }
  return *cur;
}

PayloadStats BinaryModel::payload() const {
  PayloadStats p;
  for (const auto& s : stages) {
    if (s.kind != StageKind::Conv && s.kind != StageKind::Linear) continue;
    if (s.binary) {
      p.binary_weights += numel(s.weight_shape);
      for (const auto& r : s.rows) p.packed_bits += r.logical_len;
    } else {
      p.float_weights += s.weights.size();
    }
  }
  return p;
}

// ---- export ----

namespace {

Stage bn_stage(const BatchNorm& bn) {
  Stage s;
  s.kind = StageKind::BatchNorm;
  s.gamma = to_vector(bn.state().gamma->values());
  s.beta = to_vector(bn.state().beta->values());
  s.mean = to_vector(bn.state().running_mean->values());
  s.var = to_vector(bn.state().running_var->values());
  s.epsilon = bn.state().epsilon;
  return s;
}

// sign(gamma * (x - mean) / sqrt(var + eps) + beta) as a per-channel compare.
Stage fold_threshold(const Stage& bn) {
  Stage s;
  s.kind = StageKind::Threshold;
  for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
    const double gamma = bn.gamma[c], beta = bn.beta[c];
    const double sd = std::sqrt(static_cast<double>(bn.var[c]) + bn.epsilon);
    if (gamma == 0) {
      s.direction.push_back(0);
      s.threshold.push_back(beta >= 0 ? 1.0f : -1.0f);
      continue;
    }
    s.direction.push_back(gamma > 0 ? 1 : -1);
    s.threshold.push_back(static_cast<float>(bn.mean[c] - beta * sd / gamma));
  }
  return s;
}

void set_input_quant(Stage& s, const LayerQuant& lq) {
  if (!lq.acts_quantized()) return;
  s.input_bits = lq.act_bits;
  switch (lq.method) {
    case QuantMethod::QNN:
    case QuantMethod::XNORNet:
      if (lq.act_bits == 1) {
        s.input = InputQuant::Sign;
      } else {
        s.input = InputQuant::Linear;
        std::tie(s.input_lo, s.input_hi) = lq.range(lq.act_bits);
      }
      break;
    case QuantMethod::DoReFa:
      s.input = InputQuant::DoReFa;
      break;
    case QuantMethod::TWN:
    case QuantMethod::TTQ:
      break;
  }
}

Stage weighted_stage_from(QuantLayer& layer) {
  Stage s;
  s.weight_shape = layer.shadow_weights()->shape();
  if (auto* conv = dynamic_cast<QuantConv2d*>(&layer)) {
    s.kind = StageKind::Conv;
    s.stride = conv->stride();
    s.padding = conv->padding();
  } else {
    s.kind = StageKind::Linear;
  }
  const auto& lq = layer.quant();
  set_input_quant(s, lq);
  if (layer.bias()) s.bias = to_vector(layer.bias()->values());
  if (!lq.weights_quantized()) {
    s.weights = to_vector(layer.shadow_weights()->values());
    return s;
  }
  const bool binary_method = lq.method == QuantMethod::QNN || lq.method == QuantMethod::XNORNet ||
                             lq.method == QuantMethod::DoReFa;
  if (lq.weight_bits != 1 || !binary_method)
    throw ContractError("export_binary_model: layer has " + std::string(to_string(lq.method)) + " W" +
                        std::to_string(lq.weight_bits) + " weights; only 1-bit weights can be packed");
  Graph g(false);
  const auto qw = layer.quantize_weight(g);
  s.binary = true;
  const int rows = s.weight_shape[0];
  const std::size_t fan = s.fan_in();
  for (int r = 0; r < rows; ++r)
    s.rows.push_back(pack(qw.weight->span().subspan(static_cast<std::size_t>(r) * fan, fan),
                          {static_cast<int>(fan)}));
  if (qw.post_scale) s.alpha = to_vector(*qw.post_scale);
  return s;
}

void export_module(Module& m, std::vector<Stage>& out) {
  if (auto* q = dynamic_cast<QuantLayer*>(&m)) {
    out.push_back(weighted_stage_from(*q));
  } else if (auto* bn = dynamic_cast<BatchNorm*>(&m)) {
    out.push_back(bn_stage(*bn));
  } else if (auto* act = dynamic_cast<Activation*>(&m)) {
    Stage s;
    s.kind = act->activation() == ActivationKind::ReLU ? StageKind::ReLU : StageKind::HardTanh;
    out.push_back(s);
  } else if (auto* pool = dynamic_cast<Pool2d*>(&m)) {
    Stage s;
    s.kind = pool->pool_kind() == PoolKind::Max ? StageKind::MaxPool : StageKind::AvgPool;
    s.kernel = pool->kernel();
    s.stride = pool->stride();
    out.push_back(s);
  } else if (dynamic_cast<Flatten*>(&m)) {
    out.push_back(Stage{});
  } else if (auto* xb = dynamic_cast<XnorBlock*>(&m)) {
    out.push_back(bn_stage(xb->norm()));
    out.push_back(weighted_stage_from(xb->layer()));
    if (xb->relu_after()) {
      Stage s;
      s.kind = StageKind::ReLU;
      out.push_back(s);
    }
  } else if (auto* seq = dynamic_cast<Sequential*>(&m)) {
    for (const auto& child : seq->layers()) export_module(*child, out);
  } else {
    throw ContractError("export_binary_model: unsupported module '" + m.kind() +
                        "' (only sequential models can be exported)");
  }
}

// BN directly before a sign-input layer collapses to a per-channel threshold.
// Hardtanh (sign preserving) and flatten may sit in between.
std::vector<Stage> fold_batch_norms(std::vector<Stage> stages) {
  std::vector<Stage> out;
  for (auto& s : stages) {
    const bool sign_input = (s.kind == StageKind::Conv || s.kind == StageKind::Linear) &&
                            s.input == InputQuant::Sign;
    if (sign_input && !out.empty()) {
      std::size_t at = out.size() - 1;
      const bool flattened = out[at].kind == StageKind::Flatten && at > 0;
      if (flattened) --at;
      if (out[at].kind == StageKind::HardTanh && at > 0) --at;
      if (out[at].kind == StageKind::BatchNorm) {
        Stage t = fold_threshold(out[at]);
        out.resize(at);
        out.push_back(std::move(t));
        if (flattened) out.push_back(Stage{});
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

BinaryModel export_binary_model(Network& network) {
  BinaryModel model;
  model.model_name = network.spec().name();
  model.num_classes = network.spec().num_classes;
  const auto& q = network.spec().quant;
  if (q.weight_bits != 1)
    throw ContractError("export_binary_model: model is W" + std::to_string(q.weight_bits) + "A" +
                        std::to_string(q.act_bits) + "; a W1 configuration is required");
  std::vector<Stage> stages;
  export_module(network.body(), stages);
  model.stages = fold_batch_norms(std::move(stages));
  return model;
}

double evaluate_binary(const BinaryModel& model, const Dataset& dataset, int k, int batch_size) {
  BatchIterator it(dataset, batch_size, 0, false, false);
  long hits = 0;
  for (int b = 0; b < it.batch_count(); ++b) {
    auto batch = it.batch(b);
    const auto logits = model.forward(*batch.images);
    const int n = logits.dim(0), classes = logits.dim(1);
    for (int i = 0; i < n; ++i) {
      const float* row = logits.values().data() + static_cast<std::ptrdiff_t>(i) * classes;
      const float target = row[batch.labels[static_cast<std::size_t>(i)]];
      int rank = 0;
      for (int c = 0; c < classes; ++c)
        if (row[c] > target || (row[c] == target && c < batch.labels[static_cast<std::size_t>(i)])) ++rank;
      if (rank < k) ++hits;
    }
  }
  return dataset.size() ? 100.0 * static_cast<double>(hits) / dataset.size() : 0.0;
}

// ---- file format ----

namespace {

constexpr char kMagic[4] = {'Q', 'B', 'M', '1'};

class Writer {
 public:
  std::vector<std::uint8_t> bytes;
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void floats(const std::vector<float>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (float x : v) f32(x);
  }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (int d : s) i32(d);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::vector<float> floats() {
    const auto n = u32();
    need(4ull * n);
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  Shape shape() {
    const auto n = u32();
    if (n > 8) throw FormatError("QBM1: implausible rank " + std::to_string(n) + " at offset " + std::to_string(pos_));
    Shape s(n);
    for (auto& d : s) d = i32();
    return s;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size())
      throw FormatError("QBM1: truncated at offset " + std::to_string(pos_) + " (need " + std::to_string(n) + " bytes)");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> BinaryModel::serialize() const {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u8(kBinaryModelVersion);
  w.str(model_name);
  w.u32(static_cast<std::uint32_t>(num_classes));
  w.u32(static_cast<std::uint32_t>(stages.size()));
  for (const auto& s : stages) {
    w.u8(static_cast<std::uint8_t>(s.kind));
    switch (s.kind) {
      case StageKind::Conv:
      case StageKind::Linear:
        w.shape(s.weight_shape);
        w.i32(s.stride);
        w.i32(s.padding);
        w.u8(static_cast<std::uint8_t>(s.input));
        w.u8(static_cast<std::uint8_t>(s.input_bits));
        w.f32(s.input_lo);
        w.f32(s.input_hi);
        w.u8(s.binary ? 1 : 0);
        if (s.binary) {
          // Rows share one contiguous LSB-first bit stream on disk.
          const std::uint64_t len = s.rows.empty() ? 0 : s.rows.front().logical_len;
          w.u32(static_cast<std::uint32_t>(s.rows.size()));
          w.u64(len);
          std::vector<std::uint8_t> stream((s.rows.size() * len + 7) / 8, 0);
          for (std::size_t r = 0; r < s.rows.size(); ++r)
            for (std::size_t j = 0; j < len; ++j)
              if ((s.rows[r].words[j / kWordBits] >> (j % kWordBits)) & 1u) {
                const std::size_t bit = r * len + j;
                stream[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
              }
          for (auto b : stream) w.u8(b);
        } else {
          w.floats(s.weights);
        }
        w.floats(s.alpha);
        w.floats(s.bias);
        break;
      case StageKind::BatchNorm:
        w.floats(s.gamma);
        w.floats(s.beta);
        w.floats(s.mean);
        w.floats(s.var);
        w.f32(s.epsilon);
        break;
      case StageKind::Threshold:
        w.floats(s.threshold);
        for (auto d : s.direction) w.u8(static_cast<std::uint8_t>(d));
        break;
      case StageKind::MaxPool:
      case StageKind::AvgPool:
        w.i32(s.kernel);
        w.i32(s.stride);
        break;
      case StageKind::Flatten:
      case StageKind::ReLU:
      case StageKind::HardTanh:
        break;
    }
  }
  return std::move(w.bytes);
}

BinaryModel BinaryModel::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  for (int i = 0; i < 4; ++i)
    if (r.u8() != static_cast<std::uint8_t>(kMagic[i])) throw FormatError("QBM1: bad magic at offset 0");
  const auto version = r.u8();
  if (version != kBinaryModelVersion)
    throw FormatError("QBM1: unsupported version " + std::to_string(version) + " at offset 4");
  BinaryModel m;
  m.model_name = r.str();
  m.num_classes = static_cast<int>(r.u32());
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Stage s;
    const auto kind = r.u8();
    if (kind < 1 || kind > 9) throw FormatError("QBM1: unknown stage type " + std::to_string(kind) + " at offset " + std::to_string(r.pos() - 1));
    s.kind = static_cast<StageKind>(kind);
    switch (s.kind) {
      case StageKind::Conv:
      case StageKind::Linear: {
        s.weight_shape = r.shape();
        s.stride = r.i32();
        s.padding = r.i32();
        s.input = static_cast<InputQuant>(r.u8());
        s.input_bits = r.u8();
        s.input_lo = r.f32();
        s.input_hi = r.f32();
        s.binary = r.u8() != 0;
        if (s.binary) {
          const auto rows = r.u32();
          const auto len = static_cast<std::size_t>(r.u64());
          if (len > (std::size_t{1} << 31) || rows * len / 8 > r.remaining())
            throw FormatError("QBM1: packed rows exceed the file at offset " + std::to_string(r.pos()));
          std::vector<std::uint8_t> stream((rows * len + 7) / 8);
          for (auto& b : stream) b = r.u8();
          for (std::uint32_t k = 0; k < rows; ++k) {
            PackedTensor p;
            p.logical_len = len;
            p.shape = {static_cast<int>(len)};
            p.words.assign(words_for(len), 0);
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t bit = k * len + j;
              if ((stream[bit / 8] >> (bit % 8)) & 1u) p.words[j / kWordBits] |= Word{1} << (j % kWordBits);
            }
            s.rows.push_back(std::move(p));
          }
        } else {
          s.weights = r.floats();
        }
        s.alpha = r.floats();
        s.bias = r.floats();
        break;
      }
      case StageKind::BatchNorm:
        s.gamma = r.floats();
        s.beta = r.floats();
        s.mean = r.floats();
        s.var = r.floats();
        s.epsilon = r.f32();
        break;
      case StageKind::Threshold:
        s.threshold = r.floats();
        for (std::size_t k = 0; k < s.threshold.size(); ++k) s.direction.push_back(static_cast<std::int8_t>(r.u8()));
        break;
      case StageKind::MaxPool:
      case StageKind::AvgPool:
        s.kernel = r.i32();
        s.stride = r.i32();
        break;
      case StageKind::Flatten:
      case StageKind::ReLU:
      case StageKind::HardTanh:
        break;
    }
    m.stages.push_back(std::move(s));
  }
  if (!r.done()) throw FormatError("QBM1: trailing bytes at offset " + std::to_string(r.pos()));
  return m;
}

void BinaryModel::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("write failed for " + path.string());
}

BinaryModel BinaryModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace qcnn
