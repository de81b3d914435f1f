#include "qcnn/config_io.hpp"

#include "qcnn/errors.hpp"

#include <limits>

namespace qcnn {
namespace {

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? fallback : it->template get<T>();
}

}  // namespace

Json to_json(const QuantConfig& q) {
  Json j;
  j["method"] = std::string(to_string(q.method));
  j["weight_bits"] = q.weight_bits;
  j["act_bits"] = q.act_bits;
  j["quantize_first_layer"] = q.quantize_first_layer;
  j["quantize_last_layer"] = q.quantize_last_layer;
  j["min_v"] = q.min_v ? Json(*q.min_v) : Json(nullptr);
  j["max_v"] = q.max_v ? Json(*q.max_v) : Json(nullptr);
  return j;
}

Json to_json(const ModelSpec& spec) {
  Json j;
  j["model"] = spec.name();
  j["num_classes"] = spec.num_classes;
  j["input"] = {spec.in_channels, spec.in_height, spec.in_width};
  j["nonlinearity"] = std::string(to_string(spec.hidden_activation()));
  j["nonlinearity_override"] = spec.nonlinearity.has_value();
  j["quant"] = to_json(spec.quant);
  return j;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["optimizer"] = std::string(to_string(c.optimizer));
  j["initial_lr"] = c.initial_lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr_schedule"] = {{"kind", std::string(to_string(c.schedule.kind))},
                      {"milestones", c.schedule.milestones},
                      {"gamma", c.schedule.gamma}};
  j["seed"] = c.seed;
  j["dnc_patience"] = c.dnc_patience;
  j["augment"] = c.augment;
  j["eval_batch_size"] = c.eval_batch_size;
  j["train_limit"] = c.train_limit;
  return j;
}

Json to_json(const EpochMetrics& m) {
  return Json{{"epoch", m.epoch},           {"train_loss", m.train_loss},
              {"train_top1", m.train_top1}, {"test_top1", m.test_top1},
              {"test_top5", m.test_top5},   {"lr", m.lr},
              {"wall_seconds", m.wall_seconds}};
}

Json quant_constants_json() {
  const auto& k = kQuantConstants;
  return Json{{"ste_window", {k.ste_lo, k.ste_hi}},
              {"dorefa_act_window", {k.dorefa_act_lo, k.dorefa_act_hi}},
              {"twn_delta_factor", k.twn_delta_factor},
              {"ttq_threshold", k.ttq_threshold}};
}

Json normalization_json(DatasetName dataset) {
  const auto n = dataset == DatasetName::MNIST ? mnist_normalization() : cifar10_normalization();
  Json j{{"mean", n.mean}, {"std", n.std}};
  j["augmentation"] = dataset == DatasetName::CIFAR10 ? "pad4_crop_hflip" : "none";
  return j;
}

QuantConfig quant_config_from_json(const Json& j) {
  QuantConfig q;
  q.method = parse_method(j.at("method").get<std::string>());
  q.weight_bits = j.at("weight_bits").get<int>();
  q.act_bits = j.at("act_bits").get<int>();
  q.quantize_first_layer = get_or(j, "quantize_first_layer", default_quantizes_first_last(q.method));
  q.quantize_last_layer = get_or(j, "quantize_last_layer", default_quantizes_first_last(q.method));
  if (j.contains("min_v") && !j["min_v"].is_null()) q.min_v = j["min_v"].get<float>();
  if (j.contains("max_v") && !j["max_v"].is_null()) q.max_v = j["max_v"].get<float>();
  return q;
}

ModelSpec model_spec_from_json(const Json& j) {
  auto spec = ModelSpec::from_name(j.at("model").get<std::string>(),
                                   quant_config_from_json(j.at("quant")));
  spec.num_classes = get_or(j, "num_classes", spec.num_classes);
  if (get_or(j, "nonlinearity_override", false))
    spec.nonlinearity = parse_activation(j.at("nonlinearity").get<std::string>());
  return spec;
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.initial_lr = j.at("initial_lr").get<double>();
  c.momentum = get_or(j, "momentum", c.momentum);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
  c.adam_beta1 = get_or(j, "adam_beta1", c.adam_beta1);
  c.adam_beta2 = get_or(j, "adam_beta2", c.adam_beta2);
  c.adam_epsilon = get_or(j, "adam_epsilon", c.adam_epsilon);
  c.epochs = get_or(j, "epochs", c.epochs);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  if (j.contains("lr_schedule")) {
    const auto& s = j["lr_schedule"];
    c.schedule.kind = parse_schedule(s.at("kind").get<std::string>());
    c.schedule.milestones = get_or(s, "milestones", c.schedule.milestones);
    c.schedule.gamma = get_or(s, "gamma", c.schedule.gamma);
  }
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.dnc_patience = get_or(j, "dnc_patience", c.dnc_patience);
  c.augment = get_or(j, "augment", c.augment);
  c.eval_batch_size = get_or(j, "eval_batch_size", c.eval_batch_size);
  c.train_limit = get_or(j, "train_limit", c.train_limit);
  return c;
}

EpochMetrics epoch_metrics_from_json(const Json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.train_loss = get_or(j, "train_loss", std::numeric_limits<double>::quiet_NaN());
  m.train_top1 = get_or(j, "train_top1", 0.0);
  m.test_top1 = j.at("test_top1").get<double>();
  m.test_top5 = j.at("test_top5").get<double>();
  m.lr = j.at("lr").get<double>();
  m.wall_seconds = get_or(j, "wall_seconds", 0.0);
  return m;
}

}  // namespace qcnn
