#include "qcnn/layers.hpp"

#include "qcnn/errors.hpp"
#include "qcnn/quantizers.hpp"

#include <algorithm>
#include <cctype>

namespace qcnn {
namespace {

using ConstRowMap = Eigen::Map<const RowArrayXXs>;

ArrayXs flat(const RowArrayXXs& a) { return Eigen::Map<const ArrayXs>(a.data(), a.size()); }

ArrayXs ste_mask(const ArrayXs& x, Scalar lo, Scalar hi) {
  return ((x >= lo) && (x <= hi)).cast<Scalar>();
}

}  // namespace

std::string_view to_string(ActivationKind kind) {
  return kind == ActivationKind::ReLU ? "relu" : "hardtanh";
}

ActivationKind parse_activation(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "relu") return ActivationKind::ReLU;
  if (s == "hardtanh") return ActivationKind::HardTanh;
  throw ConfigError("unknown nonlinearity '" + std::string(name) + "' (expected relu or hardtanh)");
}

TensorPtr Activation::forward(Graph& g, const TensorPtr& x) {
  return kind_ == ActivationKind::ReLU ? relu(g, x) : hardtanh(g, x);
}

BatchNorm::BatchNorm(int channels, Scalar epsilon, Scalar momentum) {
  state_.gamma = make_parameter({channels}, Scalar(1));
  state_.beta = make_parameter({channels}, Scalar(0));
  state_.running_mean = make_tensor({channels}, Scalar(0));
  state_.running_var = make_tensor({channels}, Scalar(1));
  state_.epsilon = epsilon;
  state_.momentum = momentum;
}

TensorPtr BatchNorm::forward(Graph& g, const TensorPtr& x) {
  return batch_norm(g, x, state_, training_);
}

void BatchNorm::collect_parameters(std::vector<Parameter>& out, const std::string& prefix) {
  out.push_back({prefix + "gamma", state_.gamma, false, false});
  out.push_back({prefix + "beta", state_.beta, false, false});
}

void BatchNorm::collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
  out.push_back({prefix + "running_mean", state_.running_mean});
  out.push_back({prefix + "running_var", state_.running_var});
}

TensorPtr Pool2d::forward(Graph& g, const TensorPtr& x) {
  return pool2d(g, x, pool_, kernel_, stride_);
}

QuantLayer::QuantLayer(Shape weight_shape, bool with_bias, LayerQuant quant,
                       LayerPosition position, LayerRole role)
    : quant_(quant), position_(position), role_(role) {
  const int out = weight_shape.at(0);
  shadow_ = make_parameter(std::move(weight_shape));
  if (with_bias) bias_ = make_parameter({out});
  if (quant_.method == QuantMethod::TTQ && quant_.weights_quantized()) {
    ttq_pos_ = make_parameter({1}, Scalar(1));
    ttq_neg_ = make_parameter({1}, Scalar(1));
  }
}

bool QuantLayer::sign_activations() const {
  return quant_.act_bits == 1 &&
         (quant_.method == QuantMethod::QNN || quant_.method == QuantMethod::XNORNet);
}

TensorPtr QuantLayer::quantize_input(Graph& g, const TensorPtr& x) const {
  if (!quant_.acts_quantized()) return x;
  const int bits = quant_.act_bits;
  const auto& k = kQuantConstants;
  switch (quant_.method) {
    case QuantMethod::QNN:
    case QuantMethod::XNORNet:
      if (bits == 1)
        return ste_identity(
            g, x, [](const ArrayXs& v) { return ArrayXs(quant::sign_binarize(v)); }, k.ste_lo,
            k.ste_hi);
      {
        const auto [lo, hi] = quant_.range(bits);
        return ste_identity(
            g, x,
            [bits, lo = lo, hi = hi](const ArrayXs& v) {
              return ArrayXs(quant::linear_quantize(v, bits, lo, hi));
            },
            k.ste_lo, k.ste_hi);
      }
    case QuantMethod::DoReFa:
      return ste_identity(
          g, x,
          [bits](const ArrayXs& v) { return ArrayXs(quant::dorefa_activation_quantize(v, bits)); },
          k.dorefa_act_lo, k.dorefa_act_hi);
    case QuantMethod::TWN:
    case QuantMethod::TTQ:
      break;
  }
  return x;
}

QuantizedWeight QuantLayer::quantize_weight(Graph& g) const {
  if (!quant_.weights_quantized()) return {shadow_, std::nullopt};
  const int bits = quant_.weight_bits;
  const int rows = shadow_->dim(0);
  const int cols = static_cast<int>(shadow_->size()) / rows;
  const ConstRowMap w(shadow_->values().data(), rows, cols);
  const ArrayXs& flat_w = shadow_->values();
  const auto& k = kQuantConstants;
  const bool track = g.needs_grad({shadow_.get()});

  auto sign_ste = [&] {
    return ste_identity(
        g, shadow_, [](const ArrayXs& v) { return ArrayXs(quant::sign_binarize(v)); }, k.ste_lo,
        k.ste_hi);
  };

  switch (quant_.method) {
    case QuantMethod::QNN: {
      if (bits == 1) return {sign_ste(), std::nullopt};
      const auto [lo, hi] = quant_.range(bits);
      return {ste_identity(
                  g, shadow_,
                  [bits, lo = lo, hi = hi](const ArrayXs& v) {
                    return ArrayXs(quant::linear_quantize(v, bits, lo, hi));
                  },
                  k.ste_lo, k.ste_hi),
              std::nullopt};
    }
    case QuantMethod::XNORNet: {
      auto q = quant::xnor_weight_quantize(w);
      return {sign_ste(), ArrayXs(q.alpha)};
    }
    case QuantMethod::DoReFa: {
      if (bits == 1) {
        auto q = quant::dorefa_weight_quantize(w, 1);
        return {sign_ste(), ArrayXs(q.scale)};
      }
      auto q = quant::dorefa_weight_quantize(w, bits);
      ArrayXs derivative;
      if (track) {
        // d/dW of 2*(tanh(W)/(2 max|tanh W|) + 1/2) - 1 with quantize_k passed straight through
        const ArrayXs t = flat_w.tanh();
        const Scalar max_abs = t.abs().maxCoeff();
        derivative = max_abs > 0 ? ArrayXs((Scalar(1) - t.square()) / max_abs)
                                 : ArrayXs(ArrayXs::Zero(t.size()));
      }
      return {elementwise_map(g, shadow_, flat(q.values), std::move(derivative), "dorefa_weight"),
              std::nullopt};
    }
    case QuantMethod::TWN: {
      auto q = quant::twn_ternarize(w, Scalar(k.twn_delta_factor));
      ArrayXs mask;
      if (track) mask = ste_mask(flat_w, k.ste_lo, k.ste_hi);
      return {elementwise_map(g, shadow_, flat(q.ternary), std::move(mask), "twn_weight"),
              ArrayXs(q.alpha)};
    }
    case QuantMethod::TTQ: {
      const quant::TtqScales<Scalar> scales{ttq_pos_->values()[0], ttq_neg_->values()[0]};
      const Scalar delta = quant::ttq_threshold(flat_w, Scalar(k.ttq_threshold));
      auto out = make_tensor(shadow_->shape(), ArrayXs(quant::ttq_apply(flat_w, scales, delta)));
      if (g.needs_grad({shadow_.get(), ttq_pos_.get(), ttq_neg_.get()})) {
        g.record("ttq_weight", {shadow_, ttq_pos_, ttq_neg_}, out,
                 [shadow = shadow_, pos = ttq_pos_, neg = ttq_neg_, out, delta, scales] {
                   auto grads = quant::ttq_scale_gradients(out->grad(), shadow->values(), delta,
                                                           scales);
                   if (shadow->requires_grad()) shadow->grad() += grads.d_w;
                   if (pos->requires_grad()) pos->grad()[0] += grads.d_pos;
                   if (neg->requires_grad()) neg->grad()[0] += grads.d_neg;
                 });
      }
      return {out, std::nullopt};
    }
  }
  return {shadow_, std::nullopt};
}

TensorPtr QuantLayer::forward(Graph& g, const TensorPtr& x) {
  const auto xq = quantize_input(g, x);
  const auto qw = quantize_weight(g);
  if (!qw.post_scale) return apply(g, xq, qw.weight, bias_);
  auto y = scale_channels(g, apply(g, xq, qw.weight, nullptr), *qw.post_scale);
  return bias_ ? add_channel_bias(g, y, bias_) : y;
}

void QuantLayer::collect_parameters(std::vector<Parameter>& out, const std::string& prefix) {
  const bool binary_shadow =
      quant_.weight_bits == 1 &&
      (quant_.method == QuantMethod::QNN || quant_.method == QuantMethod::DoReFa ||
       quant_.method == QuantMethod::XNORNet);
  out.push_back({prefix + "weight", shadow_, true, binary_shadow});
  if (bias_) out.push_back({prefix + "bias", bias_, false, false});
  if (ttq_pos_) {
    out.push_back({prefix + "ttq_pos", ttq_pos_, false, false});
    out.push_back({prefix + "ttq_neg", ttq_neg_, false, false});
  }
}

QuantConv2d::QuantConv2d(int in_channels, int out_channels, int kernel, int stride, int padding,
                         bool with_bias, LayerQuant quant, LayerPosition position, LayerRole role)
    : QuantLayer({out_channels, in_channels, kernel, kernel}, with_bias, quant, position, role),
      stride_(stride),
      padding_(padding) {}

TensorPtr QuantConv2d::apply(Graph& g, const TensorPtr& x, const TensorPtr& w,
                             const TensorPtr& bias) const {
  return conv2d(g, x, w, bias, stride_, padding_);
}

QuantLinear::QuantLinear(int in_features, int out_features, bool with_bias, LayerQuant quant,
                         LayerPosition position)
    : QuantLayer({out_features, in_features}, with_bias, quant, position, LayerRole::Main) {}

TensorPtr QuantLinear::apply(Graph& g, const TensorPtr& x, const TensorPtr& w,
                             const TensorPtr& bias) const {
  return linear(g, x, w, bias);
}

TensorPtr Sequential::forward(Graph& g, const TensorPtr& x) {
  TensorPtr h = x;
  for (auto& layer : layers_) h = layer->forward(g, h);
  return h;
}

void Sequential::collect_parameters(std::vector<Parameter>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i]->collect_parameters(out, prefix + std::to_string(i) + ".");
}

void Sequential::collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i]->collect_buffers(out, prefix + std::to_string(i) + ".");
}

void Sequential::visit(const std::function<void(Module&)>& fn) {
  fn(*this);
  for (auto& layer : layers_) layer->visit(fn);
}

void Sequential::set_training(bool training) {
  training_ = training;
  for (auto& layer : layers_) layer->set_training(training);
}

ResidualBlock::ResidualBlock(Sequential branch, Sequential shortcut, ActivationKind post)
    : branch_(std::move(branch)), shortcut_(std::move(shortcut)), post_(post) {}

TensorPtr ResidualBlock::forward(Graph& g, const TensorPtr& x) {
  auto main = branch_.forward(g, x);
  auto skip = shortcut_.empty() ? x : shortcut_.forward(g, x);
  if (main->shape() != skip->shape())
    throw DimensionError("residual: branch output " + to_string(main->shape()) +
                         " does not match shortcut " + to_string(skip->shape()));
  return post_.forward(g, add(g, main, skip));
}

void ResidualBlock::collect_parameters(std::vector<Parameter>& out, const std::string& prefix) {
  branch_.collect_parameters(out, prefix + "branch.");
  shortcut_.collect_parameters(out, prefix + "shortcut.");
}

void ResidualBlock::collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
  branch_.collect_buffers(out, prefix + "branch.");
  shortcut_.collect_buffers(out, prefix + "shortcut.");
}

void ResidualBlock::visit(const std::function<void(Module&)>& fn) {
  fn(*this);
  branch_.visit(fn);
  shortcut_.visit(fn);
}

void ResidualBlock::set_training(bool training) {
  training_ = training;
  branch_.set_training(training);
  shortcut_.set_training(training);
}

XnorBlock::XnorBlock(std::unique_ptr<BatchNorm> norm, std::unique_ptr<QuantLayer> layer,
                     bool relu_after)
    : norm_(std::move(norm)), layer_(std::move(layer)), relu_after_(relu_after) {}

TensorPtr XnorBlock::forward(Graph& g, const TensorPtr& x) {
  auto h = layer_->forward(g, norm_->forward(g, x));
  return relu_after_ ? relu(g, h) : h;
}

void XnorBlock::collect_parameters(std::vector<Parameter>& out, const std::string& prefix) {
  norm_->collect_parameters(out, prefix + "bn.");
  layer_->collect_parameters(out, prefix + "layer.");
}

void XnorBlock::collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
  norm_->collect_buffers(out, prefix + "bn.");
}

void XnorBlock::visit(const std::function<void(Module&)>& fn) {
  fn(*this);
  norm_->visit(fn);
  layer_->visit(fn);
}

void XnorBlock::set_training(bool training) {
  training_ = training;
  norm_->set_training(training);
  layer_->set_training(training);
}

}  // namespace qcnn
