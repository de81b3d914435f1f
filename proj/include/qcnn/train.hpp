#pragma once

#include "qcnn/data.hpp"
#include "qcnn/model_zoo.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qcnn {

enum class OptimizerKind { SgdMomentum, Adam };
std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

enum class ScheduleKind { Constant, Step, Cosine };
std::string_view to_string(ScheduleKind kind);
ScheduleKind parse_schedule(std::string_view name);

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Step;
  // Step milestones as fractions of the total epoch count.
  std::vector<double> milestones{0.5, 0.75};
  double gamma = 0.1;

  // Learning rate used during `epoch` (0-based) of `total_epochs`.
  double lr_at(double initial_lr, int epoch, int total_epochs) const;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double initial_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 30;
  int batch_size = 128;
  LrSchedule schedule;
  std::uint64_t seed = 1;
  int dnc_patience = 5;
  bool augment = true;     // only has an effect on CIFAR-10
  int eval_batch_size = 500;
  int train_limit = 0;     // > 0 trains on the first N training samples only

  // Dataset/precision defaults: 30 epochs on MNIST, 60 on CIFAR-10 (100/200
  // with full_schedule); weight decay 1e-4 for full-precision baselines only.
  static TrainConfig defaults(DatasetName dataset, bool quantized, bool full_schedule = false);
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double train_top1 = 0;  // running accuracy over the epoch's minibatches
  double test_top1 = 0;
  double test_top5 = 0;
  double lr = 0;
  double wall_seconds = 0;
};

enum class RunStatus { Completed, DNC, Diverged, Running };
std::string_view to_string(RunStatus status);
RunStatus parse_status(std::string_view name);

struct TrainResult {
  RunStatus status = RunStatus::Running;
  EpochMetrics best;
  std::vector<EpochMetrics> history;
  std::string message;
};

// Accuracy a run has to beat to count as converged: twice random guessing.
double dnc_threshold(int num_classes);

struct OptimizerState {
  std::vector<ArrayXs> first;   // SGD velocity or Adam m
  std::vector<ArrayXs> second;  // Adam v
  long step = 0;

  void reset(std::span<const Parameter> params);
};

// v = momentum*v + g;  w -= lr*v + lr*wd*w (decay only where Parameter::decay).
void sgd_momentum_step(std::span<const Parameter> params, OptimizerState& state,
                       const TrainConfig& config, double lr);
// Bias-corrected Adam with the same decoupled decay term.
void adam_step(std::span<const Parameter> params, OptimizerState& state, const TrainConfig& config,
               double lr);
// Clamp shadow weights flagged clip_unit to [-1, 1].
void clip_shadow_weights(std::span<const Parameter> params);

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  // Written whenever test top1 improves.
  std::filesystem::path best_checkpoint;
  bool verbose = false;
};

TrainResult train(Network& network, const Dataset& train_set, const Dataset& test_set,
                  const TrainConfig& config, const TrainHooks& hooks = {});

struct TopK {
  double top1 = 0;
  double top5 = 0;
};

// Counts label hits among the k largest logits; equal logits rank the lower
// class index first.
bool in_top_k(std::span<const float> logits, int label, int k);
double evaluate_topk(Network& network, const Dataset& dataset, int k, int batch_size = 500);
TopK evaluate(Network& network, const Dataset& dataset, int batch_size = 500);
// Eval-mode logits for the whole dataset, [N, num_classes].
Tensor predict(Network& network, const Dataset& dataset, int batch_size = 500);

struct SearchPoint {
  OptimizerKind optimizer;
  double lr;
  RunStatus status;
  double best_top1;
};

struct SearchResult {
  std::optional<TrainConfig> selected;  // empty when every point failed
  std::vector<SearchPoint> points;
  std::string failure_report() const;
};

struct SearchGrid {
  std::vector<OptimizerKind> optimizers{OptimizerKind::SgdMomentum, OptimizerKind::Adam};
  std::vector<double> learning_rates{0.1, 0.01, 0.001};
};

// Short runs over optimizer x lr; highest test top1 wins, ties go to the lower
// lr. Returns `base` with the winning optimizer/lr and the full epoch count.
SearchResult hyperparameter_search(const ModelSpec& spec, const Dataset& train_set,
                                   const Dataset& test_set, const SearchGrid& grid,
                                   int short_epochs, const TrainConfig& base);

// Checkpoints: "QCF1", u32 version, u32 header length, JSON header, then
// named float tensors (parameters, buffers, optimizer moments).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  int epoch = 0;
  long optimizer_step = 0;
  std::uint64_t seed = 0;
  std::string model;
};

void save_checkpoint(const std::filesystem::path& path, Network& network,
                     const OptimizerState& state, const TrainConfig& config, int epoch);
// Model configuration stored in a checkpoint header.
ModelSpec checkpoint_model_spec(const std::filesystem::path& path);
CheckpointInfo load_checkpoint(const std::filesystem::path& path, Network& network,
                               OptimizerState* state = nullptr);

}  // namespace qcnn
