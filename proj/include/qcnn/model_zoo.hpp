#pragma once

#include "qcnn/layers.hpp"
#include "qcnn/quant_config.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace qcnn {

enum class Architecture { LeNet5, ResNet };

struct ModelSpec {
  Architecture architecture = Architecture::LeNet5;
  int depth = 20;  // ResNet only; 6n+2
  int num_classes = 10;
  int in_channels = 1, in_height = 28, in_width = 28;
  QuantConfig quant;
  std::optional<ActivationKind> nonlinearity;

  static ModelSpec lenet5(QuantConfig quant);
  static ModelSpec resnet(int depth, QuantConfig quant);
  // "lenet5", "resnet20", "resnet32", ...
  static ModelSpec from_name(const std::string& name, QuantConfig quant);

  std::string name() const;
  // Hidden-layer nonlinearity: the override when set, otherwise hardtanh for
  // QNN with quantized activations and ReLU elsewhere.
  ActivationKind hidden_activation() const;
};

void validate(const ModelSpec& spec);

class Network {
 public:
  Network(ModelSpec spec, Sequential body);

  TensorPtr forward(Graph& g, const TensorPtr& x) { return body_.forward(g, x); }
  void set_training(bool training) { body_.set_training(training); }

  const ModelSpec& spec() const { return spec_; }
  Sequential& body() { return body_; }
  const Sequential& body() const { return body_; }

  std::vector<Parameter> parameters();
  std::vector<NamedBuffer> buffers();
  // Every conv/fc layer in forward order, shortcut projections included.
  std::vector<QuantLayer*> quant_layers();
  // Conv/fc layers on the main path (what "ResNet-20" counts).
  std::vector<QuantLayer*> weighted_layers();
  std::size_t parameter_count();
  void zero_grad();

 private:
  ModelSpec spec_;
  Sequential body_;
};

std::unique_ptr<Network> build_model(const ModelSpec& spec);

// Kaiming fan-in normal init for conv/fc weights, zero biases, BN gamma=1
// beta=0, TTQ scales from the initial weights. Deterministic in `seed`.
void init_parameters(Network& network, std::uint64_t seed);

}  // namespace qcnn
