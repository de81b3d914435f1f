#include "qcnn/train.hpp"

#include "qcnn/config_io.hpp"
#include "qcnn/errors.hpp"
#include "qcnn/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>

namespace qcnn {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool in_set(const std::vector<int>& v, std::size_t n) {
  return std::all_of(v.begin(), v.end(), [&](int i) { return i >= 0 && static_cast<std::size_t>(i) < n; });
}

}  // namespace

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "sgd_momentum";
}

OptimizerKind parse_optimizer(std::string_view name) {
  const auto s = lower(name);
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd" || s == "sgd_momentum" || s == "momentum") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected sgd_momentum or adam)");
}

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::Step: return "step";
    case ScheduleKind::Cosine: return "cosine";
  }
  return "step";
}

ScheduleKind parse_schedule(std::string_view name) {
  const auto s = lower(name);
  if (s == "constant") return ScheduleKind::Constant;
  if (s == "step") return ScheduleKind::Step;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown lr schedule '" + std::string(name) + "'");
}

double LrSchedule::lr_at(double initial_lr, int epoch, int total_epochs) const {
  switch (kind) {
    case ScheduleKind::Constant:
      return initial_lr;
    case ScheduleKind::Step: {
      double lr = initial_lr;
      for (double m : milestones)
        if (epoch >= static_cast<int>(std::lround(m * total_epochs))) lr *= gamma;
      return lr;
    }
    case ScheduleKind::Cosine:
      if (total_epochs <= 1) return initial_lr;
      return 0.5 * initial_lr *
             (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(total_epochs)));
  }
  return initial_lr;
}

TrainConfig TrainConfig::defaults(DatasetName dataset, bool quantized, bool full_schedule) {
  TrainConfig c;
  if (dataset == DatasetName::MNIST)
    c.epochs = full_schedule ? 100 : 30;
  else
    c.epochs = full_schedule ? 200 : 60;
  c.weight_decay = quantized ? 0.0 : 1e-4;
  return c;
}

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::Completed: return "completed";
    case RunStatus::DNC: return "dnc";
    case RunStatus::Diverged: return "diverged";
    case RunStatus::Running: return "running";
  }
  return "running";
}

RunStatus parse_status(std::string_view name) {
  const auto s = lower(name);
  if (s == "completed") return RunStatus::Completed;
  if (s == "dnc") return RunStatus::DNC;
  if (s == "diverged") return RunStatus::Diverged;
  if (s == "running") return RunStatus::Running;
  throw FormatError("unknown run status '" + std::string(name) + "'");
}

double dnc_threshold(int num_classes) { return 2.0 * 100.0 / num_classes; }

void OptimizerState::reset(std::span<const Parameter> params) {
  first.clear();
  second.clear();
  for (const auto& p : params) {
    first.push_back(ArrayXs::Zero(static_cast<Eigen::Index>(p.tensor->size())));
    second.push_back(ArrayXs::Zero(static_cast<Eigen::Index>(p.tensor->size())));
  }
  step = 0;
}

void sgd_momentum_step(std::span<const Parameter> params, OptimizerState& state,
                       const TrainConfig& config, double lr) {
  if (state.first.size() != params.size()) state.reset(params);
  ++state.step;
  const auto flr = static_cast<Scalar>(lr);
  const auto mom = static_cast<Scalar>(config.momentum);
  const auto wd = static_cast<Scalar>(config.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].tensor->values();
    if (!params[i].tensor->has_grad()) continue;
    auto& v = state.first[i];
    v = mom * v + params[i].tensor->grad();
    if (params[i].decay && wd != 0) w -= flr * wd * w;
    w -= flr * v;
  }
}

void adam_step(std::span<const Parameter> params, OptimizerState& state, const TrainConfig& config,
               double lr) {
  if (state.first.size() != params.size()) state.reset(params);
  ++state.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const auto wd = static_cast<Scalar>(config.weight_decay);
  const auto flr = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].tensor->has_grad()) continue;
    auto& w = params[i].tensor->values();
    const auto& g = params[i].tensor->grad();
    auto& m = state.first[i];
    auto& v = state.second[i];
    m = static_cast<Scalar>(b1) * m + static_cast<Scalar>(1 - b1) * g;
    v = static_cast<Scalar>(b2) * v + static_cast<Scalar>(1 - b2) * g.square();
    if (params[i].decay && wd != 0) w -= flr * wd * w;
    w -= flr * (m / static_cast<Scalar>(c1)) /
         ((v / static_cast<Scalar>(c2)).sqrt() + static_cast<Scalar>(config.adam_epsilon));
  }
}

void clip_shadow_weights(std::span<const Parameter> params) {
  for (const auto& p : params)
    if (p.clip_unit) p.tensor->values() = p.tensor->values().cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
}

bool in_top_k(std::span<const float> logits, int label, int k) {
  const float target = logits[static_cast<std::size_t>(label)];
  int rank = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    const auto ci = static_cast<int>(c);
    if (logits[c] > target || (logits[c] == target && ci < label)) ++rank;
  }
  return rank < k;
}

Tensor predict(Network& network, const Dataset& dataset, int batch_size) {
  const bool was_training = network.body().training();
  network.set_training(false);
  BatchIterator it(dataset, batch_size, 0, false, false);
  Tensor out({dataset.size(), network.spec().num_classes});
  Eigen::Index offset = 0;
  for (int b = 0; b < it.batch_count(); ++b) {
    Graph g(false);
    auto batch = it.batch(b);
    auto logits = network.forward(g, batch.images);
    out.values().segment(offset, logits->values().size()) = logits->values();
    offset += logits->values().size();
  }
  network.set_training(was_training);
  return out;
}

namespace {

double topk_from_logits(const Tensor& logits, const std::vector<int>& labels, int k) {
  const int n = logits.dim(0), classes = logits.dim(1);
  if (k < 1 || k > classes)
    throw ConfigError("k = " + std::to_string(k) + " must be in [1, " + std::to_string(classes) + "]");
  if (n == 0) return 0.0;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    std::span<const float> row(logits.values().data() + static_cast<std::ptrdiff_t>(i) * classes,
                               static_cast<std::size_t>(classes));
    if (in_top_k(row, labels[static_cast<std::size_t>(i)], k)) ++hits;
  }
  return 100.0 * hits / n;
}

}  // namespace

double evaluate_topk(Network& network, const Dataset& dataset, int k, int batch_size) {
  return topk_from_logits(predict(network, dataset, batch_size), dataset.labels, k);
}

TopK evaluate(Network& network, const Dataset& dataset, int batch_size) {
  const auto logits = predict(network, dataset, batch_size);
  const int k5 = std::min(5, network.spec().num_classes);
  return {topk_from_logits(logits, dataset.labels, 1), topk_from_logits(logits, dataset.labels, k5)};
}

TrainResult train(Network& network, const Dataset& train_set, const Dataset& test_set,
                  const TrainConfig& config, const TrainHooks& hooks) {
  const auto& spec = network.spec();
  if (train_set.channels() != spec.in_channels || train_set.height() != spec.in_height ||
      train_set.width() != spec.in_width)
    throw DimensionError("dataset images are " + to_string(Shape{train_set.channels(), train_set.height(), train_set.width()}) +
                         " but " + spec.name() + " expects " +
                         to_string(Shape{spec.in_channels, spec.in_height, spec.in_width}));
  if (!in_set(train_set.labels, static_cast<std::size_t>(spec.num_classes)))
    throw DimensionError("training labels exceed the model's class count");
  if (config.epochs < 0 || config.batch_size <= 0 || config.initial_lr < 0)
    throw ConfigError("epochs, batch size and learning rate must be non-negative (batch > 0)");

  if (config.train_limit < 0) throw ConfigError("train_limit must be non-negative");
  Dataset limited;
  if (config.train_limit > 0 && config.train_limit < train_set.size()) limited = train_set.head(config.train_limit);
  const Dataset& samples = limited.size() > 0 ? limited : train_set;

  auto params = network.parameters();
  OptimizerState state;
  state.reset(params);
  BatchIterator it(samples, config.batch_size, config.seed, true, config.augment);

  TrainResult result;
  result.best.test_top1 = -1;
  const double threshold = dnc_threshold(spec.num_classes);
  int since_improvement = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = config.schedule.lr_at(config.initial_lr, epoch, config.epochs);
    network.set_training(true);
    it.start_epoch(epoch);
    double loss_sum = 0;
    long correct = 0, seen = 0;
    bool diverged = false;
    for (int b = 0; b < it.batch_count(); ++b) {
      auto batch = it.batch(b);
      Graph g(true);
      auto logits = network.forward(g, batch.images);
      auto loss = softmax_cross_entropy(g, logits, batch.labels);
      const double lv = loss->values()[0];
      if (!std::isfinite(lv)) {
        diverged = true;
        loss_sum = lv;
        break;
      }
      const int n = logits->dim(0), classes = logits->dim(1);
      for (int i = 0; i < n; ++i) {
        std::span<const float> row(logits->values().data() + static_cast<std::ptrdiff_t>(i) * classes,
                                   static_cast<std::size_t>(classes));
        if (in_top_k(row, batch.labels[static_cast<std::size_t>(i)], 1)) ++correct;
      }
      loss_sum += lv * n;
      seen += n;
      network.zero_grad();
      g.backward(loss);
      if (config.optimizer == OptimizerKind::Adam)
        adam_step(params, state, config, lr);
      else
        sgd_momentum_step(params, state, config, lr);
      clip_shadow_weights(params);
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr;
    if (diverged) {
      m.train_loss = std::numeric_limits<double>::quiet_NaN();
      m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.history.push_back(m);
      if (hooks.on_epoch) hooks.on_epoch(m);
      result.status = RunStatus::Diverged;
      result.message = "non-finite training loss in epoch " + std::to_string(m.epoch);
      break;
    }
    m.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    m.train_top1 = seen ? 100.0 * static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    const auto acc = evaluate(network, test_set, config.eval_batch_size);
    m.test_top1 = acc.top1;
    m.test_top5 = acc.top5;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (hooks.verbose)
      std::cerr << "epoch " << m.epoch << " loss " << m.train_loss << " train " << m.train_top1
                << " top1 " << m.test_top1 << " top5 " << m.test_top5 << " lr " << lr << " ("
                << m.wall_seconds << "s)\n";

    if (m.test_top1 > result.best.test_top1) {
      result.best = m;
      if (!hooks.best_checkpoint.empty())
        save_checkpoint(hooks.best_checkpoint, network, state, config, m.epoch);
    }
    since_improvement = result.best.test_top1 > threshold ? 0 : since_improvement + 1;
    if (config.dnc_patience > 0 && since_improvement >= config.dnc_patience) {
      result.status = RunStatus::DNC;
      result.message = "top1 stayed at or below " + std::to_string(threshold) + "% for " +
                       std::to_string(config.dnc_patience) + " epochs";
      break;
    }
  }

  if (result.best.test_top1 < 0) result.best = EpochMetrics{};
  if (result.status == RunStatus::Running)
    result.status = result.best.test_top1 > threshold || result.history.empty() ? RunStatus::Completed
                                                                                : RunStatus::DNC;
  return result;
}

std::string SearchResult::failure_report() const {
  std::ostringstream os;
  os << "hyperparameter search failed: every grid point failed to converge";
  for (const auto& p : points)
    os << "\n  " << to_string(p.optimizer) << " lr=" << p.lr << ": " << to_string(p.status)
       << " (best top1 " << p.best_top1 << "%)";
  return os.str();
}

SearchResult hyperparameter_search(const ModelSpec& spec, const Dataset& train_set,
                                   const Dataset& test_set, const SearchGrid& grid,
                                   int short_epochs, const TrainConfig& base) {
  if (grid.optimizers.empty() || grid.learning_rates.empty())
    throw ConfigError("hyperparameter search grid is empty");
  SearchResult result;
  std::optional<std::size_t> winner;
  for (auto opt : grid.optimizers) {
    for (double lr : grid.learning_rates) {
      TrainConfig c = base;
      c.optimizer = opt;
      c.initial_lr = lr;
      c.epochs = short_epochs;
      auto network = build_model(spec);
      init_parameters(*network, c.seed);
      const auto r = train(*network, train_set, test_set, c);
      result.points.push_back({opt, lr, r.status, r.best.test_top1});
      if (r.status != RunStatus::Completed) continue;
      const auto& cur = result.points.back();
      if (!winner) {
        winner = result.points.size() - 1;
        continue;
      }
      const auto& best = result.points[*winner];
      if (cur.best_top1 > best.best_top1 || (cur.best_top1 == best.best_top1 && cur.lr < best.lr))
        winner = result.points.size() - 1;
    }
  }
  if (winner) {
    TrainConfig c = base;
    c.optimizer = result.points[*winner].optimizer;
    c.initial_lr = result.points[*winner].lr;
    result.selected = c;
  }
  return result;
}

namespace {

constexpr char kCheckpointMagic[4] = {'Q', 'C', 'F', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& source) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(source + ": truncated checkpoint");
  return v;
}

void write_named(std::ostream& os, const std::string& name, const ArrayXs& values) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(values.size()));
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(Scalar)));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Network& network,
                     const OptimizerState& state, const TrainConfig& config, int epoch) {
  auto params = network.parameters();
  auto buffers = network.buffers();
  Json header;
  header["model"] = to_json(network.spec());
  header["train_config"] = to_json(config);
  header["epoch"] = epoch;
  header["optimizer_step"] = state.step;
  // Batch order and augmentation are pure functions of (seed, epoch), so the
  // two values fully restore the data RNG.
  header["rng"] = {{"seed", config.seed}, {"next_epoch", epoch}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(kCheckpointMagic, 4);
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::uint32_t count = static_cast<std::uint32_t>(params.size() + buffers.size());
  const bool with_state = state.first.size() == params.size() && !params.empty();
  if (with_state) count += static_cast<std::uint32_t>(2 * params.size());
  write_pod<std::uint32_t>(os, count);
  for (const auto& p : params) write_named(os, p.name, p.tensor->values());
  for (const auto& b : buffers) write_named(os, b.name, b.tensor->values());
  if (with_state) {
    for (std::size_t i = 0; i < params.size(); ++i) write_named(os, "opt.m." + params[i].name, state.first[i]);
    for (std::size_t i = 0; i < params.size(); ++i) write_named(os, "opt.v." + params[i].name, state.second[i]);
  }
  if (!os) throw FormatError("write failed for " + path.string());
}

namespace {

Json read_checkpoint_header(std::istream& is, const std::string& source) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError(source + ": bad checkpoint magic at offset 0 (expected QCF1)");
  const auto version = read_pod<std::uint32_t>(is, source);
  if (version != kCheckpointVersion)
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  const auto header_len = read_pod<std::uint32_t>(is, source);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), header_len)) throw FormatError(source + ": truncated header");
  return Json::parse(text);
}

}  // namespace

ModelSpec checkpoint_model_spec(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return model_spec_from_json(read_checkpoint_header(is, path.string()).at("model"));
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, Network& network,
                               OptimizerState* state) {
  const std::string source = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + source);
  const auto header = read_checkpoint_header(is, source);
  CheckpointInfo info;
  info.epoch = header.at("epoch").get<int>();
  info.optimizer_step = header.at("optimizer_step").get<long>();
  info.seed = header.at("rng").at("seed").get<std::uint64_t>();
  info.model = header.at("model").at("model").get<std::string>();
  if (info.model != network.spec().name())
    throw ContractError(source + ": checkpoint holds " + info.model + " but the network is " +
                        network.spec().name());
  if (header.at("model") != to_json(network.spec()))
    throw ContractError(source + ": checkpoint model config " + header.at("model").dump() +
                        " differs from the network's " + to_json(network.spec()).dump());

  std::map<std::string, ArrayXs> tensors;
  const auto count = read_pod<std::uint32_t>(is, source);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = read_pod<std::uint32_t>(is, source);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw FormatError(source + ": truncated tensor name");
    const auto n = read_pod<std::uint64_t>(is, source);
    ArrayXs values(static_cast<Eigen::Index>(n));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(Scalar))))
      throw FormatError(source + ": truncated tensor " + name);
    tensors.emplace(std::move(name), std::move(values));
  }

  auto assign = [&](const std::string& name, ArrayXs& dst) {
    auto found = tensors.find(name);
    if (found == tensors.end()) throw FormatError(source + ": missing tensor " + name);
    if (found->second.size() != dst.size())
      throw DimensionError(source + ": tensor " + name + " has " + std::to_string(found->second.size()) +
                           " values, expected " + std::to_string(dst.size()));
    dst = found->second;
  };
  auto params = network.parameters();
  for (auto& p : params) assign(p.name, p.tensor->values());
  for (auto& b : network.buffers()) assign(b.name, b.tensor->values());
  if (state) {
    state->reset(params);
    if (tensors.count("opt.m." + params.front().name)) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        assign("opt.m." + params[i].name, state->first[i]);
        assign("opt.v." + params[i].name, state->second[i]);
      }
      state->step = info.optimizer_step;
    }
  }
  return info;
}

}  // namespace qcnn
