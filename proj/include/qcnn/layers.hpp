#pragma once

#include "qcnn/graph.hpp"
#include "qcnn/ops.hpp"
#include "qcnn/quant_config.hpp"
#include "qcnn/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace qcnn {

struct Parameter {
  std::string name;
  TensorPtr tensor;
  bool decay = true;      // subject to weight decay
  bool clip_unit = false; // clipped to [-1,1] after each update (1-bit shadow weights)
};

struct NamedBuffer {
  std::string name;
  TensorPtr tensor;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual TensorPtr forward(Graph& g, const TensorPtr& x) = 0;
  virtual std::string kind() const = 0;

  virtual void collect_parameters(std::vector<Parameter>& /*out*/, const std::string& /*prefix*/) {}
  virtual void collect_buffers(std::vector<NamedBuffer>& /*out*/, const std::string& /*prefix*/) {}
  // Pre-order traversal over this module and its children.
  virtual void visit(const std::function<void(Module&)>& fn) { fn(*this); }

  virtual void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

 protected:
  bool training_ = true;
};

using ModulePtr = std::unique_ptr<Module>;

enum class ActivationKind { ReLU, HardTanh };
std::string_view to_string(ActivationKind kind);
ActivationKind parse_activation(std::string_view name);

class Activation final : public Module {
 public:
  explicit Activation(ActivationKind kind) : kind_(kind) {}
  TensorPtr forward(Graph& g, const TensorPtr& x) override;
  std::string kind() const override { return std::string(to_string(kind_)); }
  ActivationKind activation() const { return kind_; }

 private:
  ActivationKind kind_;
};

class BatchNorm final : public Module {
 public:
  explicit BatchNorm(int channels, Scalar epsilon = Scalar(1e-5), Scalar momentum = Scalar(0.1));
  TensorPtr forward(Graph& g, const TensorPtr& x) override;
  std::string kind() const override { return "batch_norm"; }
  void collect_parameters(std::vector<Parameter>& out, const std::string& prefix) override;
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) override;
  const BatchNormBuffers& state() const { return state_; }
  BatchNormBuffers& state() { return state_; }
  int channels() const { return static_cast<int>(state_.gamma->size()); }

 private:
  BatchNormBuffers state_;
};

class Pool2d final : public Module {
 public:
  Pool2d(PoolKind kind, int kernel, int stride) : pool_(kind), kernel_(kernel), stride_(stride) {}
  TensorPtr forward(Graph& g, const TensorPtr& x) override;
  std::string kind() const override { return pool_ == PoolKind::Max ? "max_pool" : "avg_pool"; }
  PoolKind pool_kind() const { return pool_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }

 private:
  PoolKind pool_;
  int kernel_, stride_;
};

class GlobalAvgPool final : public Module {
 public:
  TensorPtr forward(Graph& g, const TensorPtr& x) override { return global_avg_pool(g, x); }
  std::string kind() const override { return "global_avg_pool"; }
};

class Flatten final : public Module {
 public:
  TensorPtr forward(Graph& g, const TensorPtr& x) override { return flatten(g, x); }
  std::string kind() const override { return "flatten"; }
};

// Quantized weights handed to the underlying conv/linear: `weight` carries a
// backward path to the shadow weights; `post_scale`, when set, multiplies
// output channel f after the product (alpha_f * (x * B_f)).
struct QuantizedWeight {
  TensorPtr weight;
  std::optional<ArrayXs> post_scale;
};

enum class LayerRole { Main, Shortcut };

// Conv or fully connected layer trained through full-precision shadow
// weights. Each forward recomputes the quantized weights from the shadow copy
// and quantizes the incoming activations; the shadow copy is never written by
// forward().
class QuantLayer : public Module {
 public:
  QuantLayer(Shape weight_shape, bool with_bias, LayerQuant quant, LayerPosition position,
             LayerRole role);

  TensorPtr forward(Graph& g, const TensorPtr& x) override;
  void collect_parameters(std::vector<Parameter>& out, const std::string& prefix) override;

  TensorPtr quantize_input(Graph& g, const TensorPtr& x) const;
  QuantizedWeight quantize_weight(Graph& g) const;

  const LayerQuant& quant() const { return quant_; }
  LayerPosition position() const { return position_; }
  LayerRole role() const { return role_; }
  int out_channels() const { return shadow_->dim(0); }
  int fan_in() const { return static_cast<int>(shadow_->size()) / shadow_->dim(0); }

  const TensorPtr& shadow_weights() const { return shadow_; }
  const TensorPtr& bias() const { return bias_; }
  // Learned TTQ scales (shape [1] each); null for other methods.
  const TensorPtr& ttq_pos() const { return ttq_pos_; }
  const TensorPtr& ttq_neg() const { return ttq_neg_; }

  // True when the activation quantizer is sign() (QNN / XNOR-Net at A1).
  bool sign_activations() const;

 protected:
  virtual TensorPtr apply(Graph& g, const TensorPtr& x, const TensorPtr& w,
                          const TensorPtr& bias) const = 0;

 private:
  TensorPtr shadow_;
  TensorPtr bias_;
  TensorPtr ttq_pos_, ttq_neg_;
  LayerQuant quant_;
  LayerPosition position_;
  LayerRole role_;
};

class QuantConv2d final : public QuantLayer {
 public:
  QuantConv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool with_bias,
              LayerQuant quant, LayerPosition position, LayerRole role = LayerRole::Main);
  std::string kind() const override { return "conv2d"; }
  int in_channels() const { return shadow_weights()->dim(1); }
  int kernel() const { return shadow_weights()->dim(2); }
  int stride() const { return stride_; }
  int padding() const { return padding_; }

 protected:
  TensorPtr apply(Graph& g, const TensorPtr& x, const TensorPtr& w,
                  const TensorPtr& bias) const override;

 private:
  int stride_, padding_;
};

class QuantLinear final : public QuantLayer {
 public:
  QuantLinear(int in_features, int out_features, bool with_bias, LayerQuant quant,
              LayerPosition position);
  std::string kind() const override { return "linear"; }
  int in_features() const { return shadow_weights()->dim(1); }

 protected:
  TensorPtr apply(Graph& g, const TensorPtr& x, const TensorPtr& w,
                  const TensorPtr& bias) const override;
};

class Sequential : public Module {
 public:
  Sequential() = default;
  explicit Sequential(std::vector<ModulePtr> layers) : layers_(std::move(layers)) {}

  TensorPtr forward(Graph& g, const TensorPtr& x) override;
  std::string kind() const override { return "sequential"; }
  void collect_parameters(std::vector<Parameter>& out, const std::string& prefix) override;
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) override;
  void visit(const std::function<void(Module&)>& fn) override;
  void set_training(bool training) override;

  Sequential& add(ModulePtr layer) {
    layers_.push_back(std::move(layer));
    return *this;
  }
  const std::vector<ModulePtr>& layers() const { return layers_; }
  bool empty() const { return layers_.empty(); }

 private:
  std::vector<ModulePtr> layers_;
};

// out = activation(branch(x) + shortcut(x)); an empty shortcut is identity.
// Shortcut projections are always full precision.
class ResidualBlock final : public Module {
 public:
  ResidualBlock(Sequential branch, Sequential shortcut, ActivationKind post);
  TensorPtr forward(Graph& g, const TensorPtr& x) override;
  std::string kind() const override { return "residual"; }
  void collect_parameters(std::vector<Parameter>& out, const std::string& prefix) override;
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) override;
  void visit(const std::function<void(Module&)>& fn) override;
  void set_training(bool training) override;

  Sequential& branch() { return branch_; }
  Sequential& shortcut() { return shortcut_; }

 private:
  Sequential branch_;
  Sequential shortcut_;
  Activation post_;
};

// XNOR-Net layer order: BatchNorm -> activation quantizer -> conv/fc -> ReLU.
class XnorBlock final : public Module {
 public:
  XnorBlock(std::unique_ptr<BatchNorm> norm, std::unique_ptr<QuantLayer> layer, bool relu_after);
  TensorPtr forward(Graph& g, const TensorPtr& x) override;
  std::string kind() const override { return "xnor_block"; }
  void collect_parameters(std::vector<Parameter>& out, const std::string& prefix) override;
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) override;
  void visit(const std::function<void(Module&)>& fn) override;
  void set_training(bool training) override;

  BatchNorm& norm() { return *norm_; }
  QuantLayer& layer() { return *layer_; }
  bool relu_after() const { return relu_after_; }

 private:
  std::unique_ptr<BatchNorm> norm_;
  std::unique_ptr<QuantLayer> layer_;
  bool relu_after_;
};

}  // namespace qcnn
