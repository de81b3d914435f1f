#include "qcnn/quant_config.hpp"

#include "qcnn/errors.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>

namespace qcnn {
namespace {

constexpr std::array<int, 6> kAllowedBits{1, 2, 3, 4, 8, 32};

bool allowed_bits(int bits) {
  return std::find(kAllowedBits.begin(), kAllowedBits.end(), bits) != kAllowedBits.end();
}

std::string bits_label(int w, int a) { return "W" + std::to_string(w) + "A" + std::to_string(a); }

}  // namespace

std::string_view to_string(QuantMethod method) {
  switch (method) {
    case QuantMethod::QNN: return "QNN";
    case QuantMethod::DoReFa: return "DoReFa";
    case QuantMethod::XNORNet: return "XNORNet";
    case QuantMethod::TWN: return "TWN";
    case QuantMethod::TTQ: return "TTQ";
  }
  return "?";
}

QuantMethod parse_method(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  s.erase(std::remove(s.begin(), s.end(), '-'), s.end());
  if (s == "qnn") return QuantMethod::QNN;
  if (s == "dorefa" || s == "dorefanet") return QuantMethod::DoReFa;
  if (s == "xnornet" || s == "xnor" || s == "bwn") return QuantMethod::XNORNet;
  if (s == "twn") return QuantMethod::TWN;
  if (s == "ttq") return QuantMethod::TTQ;
  throw ConfigError("unknown quantization method '" + std::string(name) +
                    "' (expected qnn, dorefa, xnornet, twn, ttq)");
}

std::string_view to_string(LayerPosition position) {
  switch (position) {
    case LayerPosition::First: return "first";
    case LayerPosition::Middle: return "middle";
    case LayerPosition::Last: return "last";
  }
  return "?";
}

bool default_quantizes_first_last(QuantMethod method) {
  return method == QuantMethod::QNN || method == QuantMethod::TWN;
}

QuantConfig QuantConfig::with_default_policy(QuantMethod method, int weight_bits, int act_bits) {
  QuantConfig c;
  c.method = method;
  c.weight_bits = weight_bits;
  c.act_bits = act_bits;
  c.quantize_first_layer = default_quantizes_first_last(method);
  c.quantize_last_layer = default_quantizes_first_last(method);
  return c;
}

std::optional<std::string> illegal_reason(QuantMethod method, int w, int a) {
  if (!allowed_bits(w) || !allowed_bits(a))
    return "bit widths must be in {1,2,3,4,8,32}, got " + bits_label(w, a);
  switch (method) {
    case QuantMethod::QNN:
    case QuantMethod::DoReFa:
      return std::nullopt;
    case QuantMethod::XNORNet:
      if (w == 1 && (a == 1 || a == 32)) return std::nullopt;
      return "XNORNet binarizes weights (W1) and either binarizes activations (A1) or keeps "
             "them full precision (A32, the BWN variant); got " + bits_label(w, a);
    case QuantMethod::TWN:
      if ((w == 2 && a == 32) || (w == 32 && a == 32)) return std::nullopt;
      return "TWN weights are ternary (W2, 3 of 4 levels) with full-precision activations "
             "(A32); got " + bits_label(w, a);
    case QuantMethod::TTQ:
      if (w == 2 && a == 32) return std::nullopt;
      return "TTQ weights are ternary (W2, 3 of 4 levels) with full-precision activations "
             "(A32); got " + bits_label(w, a);
  }
  return "unknown method";
}

void validate(const QuantConfig& config) {
  if (auto reason = illegal_reason(config.method, config.weight_bits, config.act_bits))
    throw ConfigError(*reason);
  if (config.min_v && config.max_v && !(*config.min_v < *config.max_v))
    throw ConfigError("min_v must be smaller than max_v");
}

std::pair<float, float> linear_range(const QuantConfig& config, int bits) {
  const float lo = config.min_v.value_or(-1.0f);
  const float hi = config.max_v.value_or(1.0f - std::ldexp(1.0f, 1 - bits));
  return {lo, hi};
}

std::pair<float, float> LayerQuant::range(int bits) const {
  return {min_v.value_or(-1.0f), max_v.value_or(1.0f - std::ldexp(1.0f, 1 - bits))};
}

LayerQuant layer_quant(const QuantConfig& config, LayerPosition position) {
  LayerQuant lq;
  lq.method = config.method;
  const bool exempt = (position == LayerPosition::First && !config.quantize_first_layer) ||
                      (position == LayerPosition::Last && !config.quantize_last_layer);
  if (exempt) return lq;  // full precision
  lq.weight_bits = config.weight_bits;
  lq.act_bits = config.act_bits;
  lq.min_v = config.min_v;
  lq.max_v = config.max_v;
  return lq;
}

}  // namespace qcnn
