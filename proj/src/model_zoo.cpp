#include "qcnn/model_zoo.hpp"

#include "qcnn/errors.hpp"
#include "qcnn/quantizers.hpp"

#include <cmath>
#include <random>

namespace qcnn {
namespace {

bool xnor_order(const ModelSpec& spec) { return spec.quant.method == QuantMethod::XNORNet; }

template <typename T, typename... Args>
std::unique_ptr<T> make(Args&&... args) {
  return std::make_unique<T>(std::forward<Args>(args)...);
}

// The last layer needs its logits renormalized when it is quantized: binary
// or [-1,1] weights without a scale give logits with an arbitrary range.
void maybe_logit_norm(const ModelSpec& spec, Sequential& body) {
  if (layer_quant(spec.quant, LayerPosition::Last).weights_quantized())
    body.add(make<BatchNorm>(spec.num_classes));
}

Sequential build_lenet5(const ModelSpec& spec) {
  const auto& q = spec.quant;
  const auto first = layer_quant(q, LayerPosition::First);
  const auto middle = layer_quant(q, LayerPosition::Middle);
  const auto last = layer_quant(q, LayerPosition::Last);
  Sequential body;

  if (xnor_order(spec)) {
    body.add(make<XnorBlock>(make<BatchNorm>(spec.in_channels),
                             make<QuantConv2d>(spec.in_channels, 6, 5, 1, 2, false, first,
                                               LayerPosition::First),
                             true));
    body.add(make<Pool2d>(PoolKind::Max, 2, 2));
    body.add(make<XnorBlock>(make<BatchNorm>(6),
                             make<QuantConv2d>(6, 16, 5, 1, 0, false, middle, LayerPosition::Middle),
                             true));
    body.add(make<Pool2d>(PoolKind::Max, 2, 2));
    body.add(make<Flatten>());
    body.add(make<XnorBlock>(make<BatchNorm>(400),
                             make<QuantLinear>(400, 120, false, middle, LayerPosition::Middle), true));
    body.add(make<XnorBlock>(make<BatchNorm>(120),
                             make<QuantLinear>(120, 84, false, middle, LayerPosition::Middle), true));
    body.add(make<XnorBlock>(make<BatchNorm>(84),
                             make<QuantLinear>(84, spec.num_classes, true, last, LayerPosition::Last),
                             false));
    maybe_logit_norm(spec, body);
    return body;
  }

  const auto act = spec.hidden_activation();
  body.add(make<QuantConv2d>(spec.in_channels, 6, 5, 1, 2, false, first, LayerPosition::First));
  body.add(make<Pool2d>(PoolKind::Max, 2, 2));
  body.add(make<BatchNorm>(6));
  body.add(make<Activation>(act));
  body.add(make<QuantConv2d>(6, 16, 5, 1, 0, false, middle, LayerPosition::Middle));
  body.add(make<Pool2d>(PoolKind::Max, 2, 2));
  body.add(make<BatchNorm>(16));
  body.add(make<Activation>(act));
  body.add(make<Flatten>());
  body.add(make<QuantLinear>(400, 120, false, middle, LayerPosition::Middle));
  body.add(make<BatchNorm>(120));
  body.add(make<Activation>(act));
  body.add(make<QuantLinear>(120, 84, false, middle, LayerPosition::Middle));
  body.add(make<BatchNorm>(84));
  body.add(make<Activation>(act));
  body.add(make<QuantLinear>(84, spec.num_classes, true, last, LayerPosition::Last));
  maybe_logit_norm(spec, body);
  return body;
}

Sequential projection(int in, int out, int stride) {
  Sequential s;
  if (stride == 1 && in == out) return s;
  s.add(make<QuantConv2d>(in, out, 1, stride, 0, false, LayerQuant{}, LayerPosition::Middle,
                          LayerRole::Shortcut));
  s.add(make<BatchNorm>(out));
  return s;
}

ModulePtr basic_block(const ModelSpec& spec, int in, int out, int stride) {
  const auto middle = layer_quant(spec.quant, LayerPosition::Middle);
  Sequential branch;
  if (xnor_order(spec)) {
    branch.add(make<XnorBlock>(make<BatchNorm>(in),
                               make<QuantConv2d>(in, out, 3, stride, 1, false, middle,
                                                 LayerPosition::Middle),
                               true));
    branch.add(make<XnorBlock>(make<BatchNorm>(out),
                               make<QuantConv2d>(out, out, 3, 1, 1, false, middle,
                                                 LayerPosition::Middle),
                               false));
    return make<ResidualBlock>(std::move(branch), projection(in, out, stride), ActivationKind::ReLU);
  }
  const auto act = spec.hidden_activation();
  branch.add(make<QuantConv2d>(in, out, 3, stride, 1, false, middle, LayerPosition::Middle));
  branch.add(make<BatchNorm>(out));
  branch.add(make<Activation>(act));
  branch.add(make<QuantConv2d>(out, out, 3, 1, 1, false, middle, LayerPosition::Middle));
  branch.add(make<BatchNorm>(out));
  return make<ResidualBlock>(std::move(branch), projection(in, out, stride), act);
}

Sequential build_resnet(const ModelSpec& spec) {
  const int blocks = (spec.depth - 2) / 6;
  const auto first = layer_quant(spec.quant, LayerPosition::First);
  const auto last = layer_quant(spec.quant, LayerPosition::Last);
  Sequential body;
  if (xnor_order(spec)) {
    body.add(make<XnorBlock>(make<BatchNorm>(spec.in_channels),
                             make<QuantConv2d>(spec.in_channels, 16, 3, 1, 1, false, first,
                                               LayerPosition::First),
                             true));
  } else {
    body.add(make<QuantConv2d>(spec.in_channels, 16, 3, 1, 1, false, first, LayerPosition::First));
    body.add(make<BatchNorm>(16));
    body.add(make<Activation>(spec.hidden_activation()));
  }
  int in = 16;
  for (int stage = 0; stage < 3; ++stage) {
    const int out = 16 << stage;
    for (int b = 0; b < blocks; ++b) {
      const int stride = (stage > 0 && b == 0) ? 2 : 1;
      body.add(basic_block(spec, in, out, stride));
      in = out;
    }
  }
  body.add(make<GlobalAvgPool>());
  if (xnor_order(spec)) {
    body.add(make<XnorBlock>(make<BatchNorm>(in),
                             make<QuantLinear>(in, spec.num_classes, true, last, LayerPosition::Last),
                             false));
  } else {
    body.add(make<QuantLinear>(in, spec.num_classes, true, last, LayerPosition::Last));
  }
  maybe_logit_norm(spec, body);
  return body;
}

}  // namespace

ModelSpec ModelSpec::lenet5(QuantConfig quant) {
  ModelSpec s;
  s.architecture = Architecture::LeNet5;
  s.quant = quant;
  return s;
}

ModelSpec ModelSpec::resnet(int depth, QuantConfig quant) {
  ModelSpec s;
  s.architecture = Architecture::ResNet;
  s.depth = depth;
  s.in_channels = 3;
  s.in_height = s.in_width = 32;
  s.quant = quant;
  return s;
}

ModelSpec ModelSpec::from_name(const std::string& name, QuantConfig quant) {
  if (name == "lenet5") return lenet5(quant);
  if (name.rfind("resnet", 0) == 0 && name.size() > 6) {
    int depth = 0;
    try {
      depth = std::stoi(name.substr(6));
    } catch (const std::exception&) {
      throw ConfigError("unknown model '" + name + "'");
    }
    return resnet(depth, quant);
  }
  throw ConfigError("unknown model '" + name + "' (expected lenet5 or resnetN with N = 6n+2)");
}

std::string ModelSpec::name() const {
  return architecture == Architecture::LeNet5 ? "lenet5" : "resnet" + std::to_string(depth);
}

ActivationKind ModelSpec::hidden_activation() const {
  if (nonlinearity) return *nonlinearity;
  if (quant.method == QuantMethod::QNN && quant.act_bits < 32) return ActivationKind::HardTanh;
  return ActivationKind::ReLU;
}

void validate(const ModelSpec& spec) {
  validate(spec.quant);
  if (spec.num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (spec.architecture == Architecture::LeNet5) {
    if (spec.in_channels != 1 || spec.in_height != 28 || spec.in_width != 28)
      throw ConfigError("lenet5 expects 1x28x28 inputs");
  } else {
    if (spec.depth < 8 || (spec.depth - 2) % 6 != 0)
      throw ConfigError("resnet depth must be 6n+2 (n >= 1), got " + std::to_string(spec.depth));
    if (spec.in_channels != 3 || spec.in_height != 32 || spec.in_width != 32)
      throw ConfigError("resnet expects 3x32x32 inputs");
  }
}

Network::Network(ModelSpec spec, Sequential body) : spec_(std::move(spec)), body_(std::move(body)) {}

std::vector<Parameter> Network::parameters() {
  std::vector<Parameter> out;
  body_.collect_parameters(out, "");
  return out;
}

std::vector<NamedBuffer> Network::buffers() {
  std::vector<NamedBuffer> out;
  body_.collect_buffers(out, "");
  return out;
}

std::vector<QuantLayer*> Network::quant_layers() {
  std::vector<QuantLayer*> out;
  body_.visit([&](Module& m) {
    if (auto* q = dynamic_cast<QuantLayer*>(&m)) out.push_back(q);
  });
  return out;
}

std::vector<QuantLayer*> Network::weighted_layers() {
  std::vector<QuantLayer*> out;
  for (auto* q : quant_layers())
    if (q->role() == LayerRole::Main) out.push_back(q);
  return out;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->size();
  return n;
}

void Network::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

std::unique_ptr<Network> build_model(const ModelSpec& spec) {
  validate(spec);
  Sequential body =
      spec.architecture == Architecture::LeNet5 ? build_lenet5(spec) : build_resnet(spec);
  return std::make_unique<Network>(spec, std::move(body));
}

void init_parameters(Network& network, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto* layer : network.quant_layers()) {
    auto& w = layer->shadow_weights()->values();
    std::normal_distribution<Scalar> dist(Scalar(0),
                                          std::sqrt(Scalar(2) / static_cast<Scalar>(layer->fan_in())));
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = dist(rng);
    if (layer->bias()) layer->bias()->values().setZero();
    if (layer->ttq_pos()) {
      // Start both learned scales at the mean magnitude of the weights that
      // survive the initial threshold.
      const Scalar delta = quant::ttq_threshold(w, Scalar(kQuantConstants.ttq_threshold));
      const ArrayXs kept = (w.abs() > delta).cast<Scalar>();
      const Scalar count = kept.sum();
      const Scalar init = count > 0 ? (w.abs() * kept).sum() / count : Scalar(1);
      layer->ttq_pos()->values()[0] = init;
      layer->ttq_neg()->values()[0] = init;
    }
  }
  network.body().visit([](Module& m) {
    if (auto* bn = dynamic_cast<BatchNorm*>(&m)) {
      bn->state().gamma->values().setOnes();
      bn->state().beta->values().setZero();
      bn->state().running_mean->values().setZero();
      bn->state().running_var->values().setOnes();
    }
  });
}

}  // namespace qcnn
