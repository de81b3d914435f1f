#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>

namespace qcnn {

enum class QuantMethod { QNN, DoReFa, XNORNet, TWN, TTQ };

std::string_view to_string(QuantMethod method);
// Accepts "qnn", "dorefa", "xnornet"/"xnor"/"bwn", "twn", "ttq" (any case).
QuantMethod parse_method(std::string_view name);

enum class LayerPosition { First, Middle, Last };
std::string_view to_string(LayerPosition position);

// Gradient windows and thresholds that are not tied to a bit width. These are
// serialized into every run record.
struct QuantConstants {
  float ste_lo = -1.0f;          // hard-tanh STE window for sign / linear quantizers
  float ste_hi = 1.0f;
  float dorefa_act_lo = 0.0f;    // DoReFa activations live in [0,1]
  float dorefa_act_hi = 1.0f;
  float twn_delta_factor = 0.7f; // delta = factor * mean|W| per output channel
  float ttq_threshold = 0.05f;   // delta = t * max|W| per layer
};

inline constexpr QuantConstants kQuantConstants{};

struct QuantConfig {
  QuantMethod method = QuantMethod::QNN;
  int weight_bits = 32;
  int act_bits = 32;
  bool quantize_first_layer = true;
  bool quantize_last_layer = true;
  // Linear-quantizer clip range; unset means [-1, 1 - 2^(1-bits)].
  std::optional<float> min_v;
  std::optional<float> max_v;

  bool full_precision() const { return weight_bits == 32 && act_bits == 32; }

  // Config with the method's first/last-layer policy.
  static QuantConfig with_default_policy(QuantMethod method, int weight_bits, int act_bits);
};

// Table of which methods quantize their first and last conv/fc layers.
bool default_quantizes_first_last(QuantMethod method);

// Reason a (method, W, A) triple is not a legal configuration, or nullopt.
std::optional<std::string> illegal_reason(QuantMethod method, int weight_bits, int act_bits);

// Throws ConfigError naming the violated constraint.
void validate(const QuantConfig& config);

// Clip range used by the linear quantizer for a given bit width.
std::pair<float, float> linear_range(const QuantConfig& config, int bits);

// Effective per-layer settings after applying the first/last policy.
struct LayerQuant {
  QuantMethod method = QuantMethod::QNN;
  int weight_bits = 32;
  int act_bits = 32;
  std::optional<float> min_v;
  std::optional<float> max_v;

  bool weights_quantized() const { return weight_bits < 32; }
  bool acts_quantized() const { return act_bits < 32; }
  bool full_precision() const { return !weights_quantized() && !acts_quantized(); }
  std::pair<float, float> range(int bits) const;
};

LayerQuant layer_quant(const QuantConfig& config, LayerPosition position);

}  // namespace qcnn
