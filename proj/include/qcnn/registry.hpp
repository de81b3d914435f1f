#pragma once

#include "qcnn/config_io.hpp"
#include "qcnn/data.hpp"
#include "qcnn/model_zoo.hpp"
#include "qcnn/train.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace qcnn {

inline constexpr int kRecordSchema = 1;

// Build-time code version (short git hash, or "unknown").
std::string code_version();

// 64-bit FNV-1a, lowercase hex.
std::string fnv1a_hex(std::string_view bytes);

// Hash of the canonical (dataset, model, train config, code version) JSON.
// The seed lives inside the train config.
std::string compute_run_id(DatasetName dataset, const ModelSpec& spec, const TrainConfig& config,
                           const std::string& version);

struct RunRecord {
  std::string run_id;
  DatasetName dataset = DatasetName::MNIST;
  ModelSpec spec;
  TrainConfig config;
  std::string version;
  std::vector<EpochMetrics> history;
  double best_top1 = 0;
  double best_top5 = 0;
  RunStatus status = RunStatus::Running;
  std::string message;

  const QuantConfig& quant() const { return spec.quant; }
  bool terminal() const { return status != RunStatus::Running; }
};

RunRecord make_record(DatasetName dataset, const ModelSpec& spec, const TrainConfig& config,
                      const TrainResult& result);

// Throws ContractError when best_top1 is not the history maximum or a dnc
// record sits at or above the threshold.
void check_invariants(const RunRecord& record);

Json to_json(const RunRecord& record);
RunRecord run_record_from_json(const Json& j);

// Append-only JSON-lines file. Appends take an exclusive flock; reads take a
// shared one and drop any line that does not parse as a whole record.
class Registry {
 public:
  explicit Registry(std::filesystem::path path);

  const std::filesystem::path& path() const { return path_; }
  void append(const RunRecord& record);
  std::vector<RunRecord> read() const;
  // Last terminal record per run_id, in first-seen order.
  std::vector<RunRecord> latest() const;
  std::set<std::string> terminal_ids() const;

 private:
  std::filesystem::path path_;
};

// Registry location: explicit flag, then QCNN_REGISTRY, then ./runs.jsonl.
std::filesystem::path resolve_registry_path(const std::string& flag_value);

// The (W, A) columns of the result tables, left to right.
const std::vector<std::pair<int, int>>& table_columns();
std::string column_label(int weight_bits, int act_bits);

struct PolicyArm {
  bool quantize_first = true;
  bool quantize_last = true;
};

struct SweepSpec {
  DatasetName dataset = DatasetName::MNIST;
  std::string model = "lenet5";
  std::vector<QuantMethod> methods;
  std::vector<std::pair<int, int>> bits;
  // Empty means each method's default first/last policy.
  std::vector<PolicyArm> policies;
  int repetitions = 1;
  std::uint64_t seed_base = 1;
  // Merged over TrainConfig::defaults for each run.
  Json train_overrides = Json::object();
};

// Keys: dataset, model, methods, bits ([[W,A],...] or "table"), policies
// ([{"quantize_first":..,"quantize_last":..}]), repetitions, seed_base, train.
SweepSpec sweep_spec_from_json(const Json& j);
Json to_json(const SweepSpec& spec);

struct PlannedRun {
  DatasetName dataset = DatasetName::MNIST;
  ModelSpec spec;
  TrainConfig config;
  std::string run_id;
};

struct SkippedTriple {
  QuantMethod method;
  int weight_bits, act_bits;
  std::string reason;
};

struct SweepPlan {
  std::vector<PlannedRun> runs;
  std::vector<SkippedTriple> skipped;
};

// Seeds are seed_base + repetition, shared by every configuration.
SweepPlan plan_sweep(const SweepSpec& spec, const std::string& version);

// Builds, initializes from config.seed and trains one planned run.
TrainResult execute_run(const PlannedRun& run, const Dataset& train_set, const Dataset& test_set,
                        const TrainHooks& hooks = {});

using RunFunction = std::function<TrainResult(const PlannedRun&)>;

struct SweepOutcome {
  int executed = 0;
  int already_done = 0;
  int failed = 0;  // threw, or ended without a terminal status
};

// Runs every planned run whose id is not terminal in the registry, `jobs` at
// a time. Exceptions are logged and counted per run.
SweepOutcome run_sweep(const SweepPlan& plan, Registry& registry, int jobs, const RunFunction& run,
                       std::ostream* log = nullptr);

// One table cell: mean best_top1/top5 over completed records, "DNC" when
// every record failed to converge, "-" when there are none.
struct TableCell {
  std::string method;
  int weight_bits = 0, act_bits = 0;
  std::string status;  // "ok", "dnc", "-"
  double top1 = 0, top5 = 0;
  int runs = 0;
};

struct ResultTable {
  std::vector<std::string> methods;  // row order
  std::vector<TableCell> cells;      // row-major, table_columns() order

  const TableCell& at(const std::string& method, int weight_bits, int act_bits) const;
  std::string render() const;
  std::string to_csv() const;
};

// Records of (dataset, model) under each method's default policy. With
// `policy` set, only records using that arm.
ResultTable build_table(const std::vector<RunRecord>& records, DatasetName dataset,
                        const std::string& model, std::optional<PolicyArm> policy = std::nullopt);
std::vector<TableCell> parse_table_csv(const std::string& text);

inline const std::vector<int> kPlotBitAxis{1, 2, 3, 4, 8, 32};

struct PlotPoint {
  std::string method;
  int weight_bits = 0, act_bits = 0;
  double top1 = 0;
};

struct PlotData {
  std::vector<int> weight_axis;  // ascending
  std::vector<int> act_axis;
  std::vector<PlotPoint> grid;   // every (method, W, A) with a completed record
};

PlotData collect_plot_data(const std::vector<RunRecord>& records, DatasetName dataset,
                           const std::string& model, std::optional<QuantMethod> method = std::nullopt);

// Writes accuracy_vs_wbits.{svg,csv}, accuracy_vs_abits_w1.{svg,csv} and
// grid_<method>.svg plus grid.csv into `dir`. Returns the files written.
std::vector<std::filesystem::path> export_plots(const PlotData& data, const std::filesystem::path& dir);

}  // namespace qcnn
