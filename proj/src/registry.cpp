#include "qcnn/registry.hpp"

#include "qcnn/errors.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#ifndef QCNN_CODE_VERSION
#define QCNN_CODE_VERSION "unknown"
#endif

namespace qcnn {
namespace fs = std::filesystem;

namespace {

// Holds an fd and its flock for the lifetime of the scope.
class LockedFile {
 public:
  LockedFile(const fs::path& path, int flags, int lock) {
    fd_ = ::open(path.c_str(), flags, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
    while (::flock(fd_, lock) != 0) {
      if (errno != EINTR) {
        ::close(fd_);
        throw std::runtime_error("cannot lock " + path.string() + ": " + std::strerror(errno));
      }
    }
  }
  ~LockedFile() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  LockedFile(const LockedFile&) = delete;
  LockedFile& operator=(const LockedFile&) = delete;
  int fd() const { return fd_; }

 private:
  int fd_ = -1;
};

std::string shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, end) : std::to_string(v);
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string row_label(const std::string& method) {
  switch (parse_method(method)) {
    case QuantMethod::QNN: return "QNN";
    case QuantMethod::DoReFa: return "DoReFa-Net";
    case QuantMethod::XNORNet: return "XNOR-Net";
    case QuantMethod::TWN: return "TWN";
    case QuantMethod::TTQ: return "TTQ";
  }
  return method;
}

bool matches_policy(const QuantConfig& q, std::optional<PolicyArm> policy) {
  if (policy) return q.quantize_first_layer == policy->quantize_first &&
                     q.quantize_last_layer == policy->quantize_last;
  const bool d = default_quantizes_first_last(q.method);
  return q.quantize_first_layer == d && q.quantize_last_layer == d;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::string code_version() { return QCNN_CODE_VERSION; }

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string compute_run_id(DatasetName dataset, const ModelSpec& spec, const TrainConfig& config,
                           const std::string& version) {
  const Json canonical{{"dataset", std::string(to_string(dataset))},
                       {"model", to_json(spec)},
                       {"train", to_json(config)},
                       {"code_version", version}};
  return fnv1a_hex(canonical.dump());
}

RunRecord make_record(DatasetName dataset, const ModelSpec& spec, const TrainConfig& config,
                      const TrainResult& result) {
  RunRecord r;
  r.dataset = dataset;
  r.spec = spec;
  r.config = config;
  r.version = code_version();
  r.run_id = compute_run_id(dataset, spec, config, r.version);
  r.history = result.history;
  r.status = result.status;
  r.message = result.message;
  for (const auto& m : r.history) {
    if (m.test_top1 > r.best_top1 || (m.test_top1 == r.best_top1 && m.test_top5 > r.best_top5)) {
      r.best_top1 = m.test_top1;
      r.best_top5 = m.test_top5;
    }
  }
  return r;
}

void check_invariants(const RunRecord& r) {
  double best = 0;
  for (const auto& m : r.history) best = std::max(best, m.test_top1);
  if (best != r.best_top1)
    throw ContractError("run " + r.run_id + ": best_top1 " + shortest(r.best_top1) +
                        " differs from the history maximum " + shortest(best));
  if (r.status == RunStatus::DNC && r.best_top1 >= dnc_threshold(r.spec.num_classes))
    throw ContractError("run " + r.run_id + ": dnc status with best_top1 " + shortest(r.best_top1) +
                        " at or above the threshold");
}

Json to_json(const RunRecord& r) {
  const auto& q = r.spec.quant;
  Json j;
  j["schema"] = kRecordSchema;
  j["run_id"] = r.run_id;
  j["dataset"] = std::string(to_string(r.dataset));
  j["model"] = r.spec.name();
  j["method"] = std::string(to_string(q.method));
  j["weight_bits"] = q.weight_bits;
  j["act_bits"] = q.act_bits;
  j["policy"] = {{"quantize_first", q.quantize_first_layer}, {"quantize_last", q.quantize_last_layer}};
  j["model_spec"] = to_json(r.spec);
  j["train_config"] = to_json(r.config);
  j["quant_constants"] = quant_constants_json();
  j["normalization"] = normalization_json(r.dataset);
  j["code_version"] = r.version;
  Json history = Json::array();
  for (const auto& m : r.history) history.push_back(to_json(m));
  j["history"] = std::move(history);
  j["best_top1"] = r.best_top1;
  j["best_top5"] = r.best_top5;
  j["status"] = std::string(to_string(r.status));
  j["message"] = r.message;
  return j;
}

RunRecord run_record_from_json(const Json& j) {
  if (j.at("schema").get<int>() != kRecordSchema)
    throw FormatError("run record schema " + j.at("schema").dump() + " is not supported");
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.dataset = parse_dataset(j.at("dataset").get<std::string>());
  r.spec = model_spec_from_json(j.at("model_spec"));
  r.config = train_config_from_json(j.at("train_config"));
  r.version = j.at("code_version").get<std::string>();
  for (const auto& m : j.at("history")) r.history.push_back(epoch_metrics_from_json(m));
  r.best_top1 = j.at("best_top1").get<double>();
  r.best_top5 = j.at("best_top5").get<double>();
  r.status = parse_status(j.at("status").get<std::string>());
  r.message = j.value("message", "");
  return r;
}

Registry::Registry(fs::path path) : path_(std::move(path)) {}

void Registry::append(const RunRecord& record) {
  if (!record.terminal()) throw ContractError("only terminal records are appended");
  check_invariants(record);
  const std::string line = to_json(record).dump() + "\n";
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  LockedFile file(path_, O_WRONLY | O_CREAT | O_APPEND, LOCK_EX);
  const char* p = line.data();
  std::size_t left = line.size();
  while (left > 0) {
    const ssize_t n = ::write(file.fd(), p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("write to " + path_.string() + " failed: " + std::strerror(errno));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  ::fsync(file.fd());
}

std::vector<RunRecord> Registry::read() const {
  std::vector<RunRecord> out;
  if (!fs::exists(path_)) return out;
  std::string text;
  {
    LockedFile file(path_, O_RDONLY, LOCK_SH);
    char buf[1 << 16];
    ssize_t n;
    while ((n = ::read(file.fd(), buf, sizeof buf)) != 0) {
      if (n < 0) {
        if (errno == EINTR) continue;
        throw std::runtime_error("read of " + path_.string() + " failed");
      }
      text.append(buf, static_cast<std::size_t>(n));
    }
  }
  std::size_t start = 0;
  while (start < text.size()) {
    const auto end = text.find('\n', start);
    if (end == std::string::npos) break;  // torn tail from a crashed writer
    const auto line = std::string_view(text).substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    try {
      out.push_back(run_record_from_json(Json::parse(line)));
    } catch (const std::exception&) {
    }
  }
  return out;
}

std::vector<RunRecord> Registry::latest() const {
  std::vector<RunRecord> out;
  std::map<std::string, std::size_t> index;
  for (auto& r : read()) {
    if (!r.terminal()) continue;
    auto it = index.find(r.run_id);
    if (it == index.end()) {
      index.emplace(r.run_id, out.size());
      out.push_back(std::move(r));
    } else {
      out[it->second] = std::move(r);
    }
  }
  return out;
}

std::set<std::string> Registry::terminal_ids() const {
  std::set<std::string> ids;
  for (const auto& r : read())
    if (r.terminal()) ids.insert(r.run_id);
  return ids;
}

fs::path resolve_registry_path(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("QCNN_REGISTRY"); env && *env) return env;
  return "runs.jsonl";
}

const std::vector<std::pair<int, int>>& table_columns() {
  static const std::vector<std::pair<int, int>> columns{
      {32, 32}, {8, 8}, {4, 4}, {2, 32}, {1, 32}, {2, 2}, {2, 1}, {1, 2}, {1, 1}};
  return columns;
}

std::string column_label(int weight_bits, int act_bits) {
  return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits);
}

SweepSpec sweep_spec_from_json(const Json& j) {
  SweepSpec s;
  s.dataset = parse_dataset(j.value("dataset", "mnist"));
  s.model = j.value("model", s.model);
  for (const auto& m : j.at("methods")) s.methods.push_back(parse_method(m.get<std::string>()));
  const auto& bits = j.at("bits");
  if (bits.is_string()) {
    if (bits.get<std::string>() != "table")
      throw ConfigError("sweep 'bits' must be a list of [W, A] pairs or \"table\"");
    s.bits = table_columns();
  } else {
    for (const auto& p : bits) {
      if (!p.is_array() || p.size() != 2) throw ConfigError("sweep 'bits' entries must be [W, A]");
      s.bits.emplace_back(p[0].get<int>(), p[1].get<int>());
    }
  }
  if (j.contains("policies"))
    for (const auto& p : j["policies"])
      s.policies.push_back({p.at("quantize_first").get<bool>(), p.at("quantize_last").get<bool>()});
  s.repetitions = j.value("repetitions", 1);
  s.seed_base = j.value("seed_base", std::uint64_t{1});
  if (j.contains("train")) s.train_overrides = j["train"];
  if (s.methods.empty() || s.bits.empty()) throw ConfigError("sweep needs at least one method and one (W, A) pair");
  if (s.repetitions < 1) throw ConfigError("sweep repetitions must be positive");
  if (!s.train_overrides.is_object()) throw ConfigError("sweep 'train' must be an object");
  return s;
}

Json to_json(const SweepSpec& s) {
  Json j;
  j["dataset"] = std::string(to_string(s.dataset));
  j["model"] = s.model;
  j["methods"] = Json::array();
  for (auto m : s.methods) j["methods"].push_back(std::string(to_string(m)));
  j["bits"] = Json::array();
  for (auto [w, a] : s.bits) j["bits"].push_back({w, a});
  j["policies"] = Json::array();
  for (const auto& p : s.policies)
    j["policies"].push_back({{"quantize_first", p.quantize_first}, {"quantize_last", p.quantize_last}});
  j["repetitions"] = s.repetitions;
  j["seed_base"] = s.seed_base;
  j["train"] = s.train_overrides;
  return j;
}

SweepPlan plan_sweep(const SweepSpec& s, const std::string& version) {
  SweepPlan plan;
  std::vector<std::optional<PolicyArm>> arms;
  if (s.policies.empty()) arms.push_back(std::nullopt);
  for (const auto& p : s.policies) arms.emplace_back(p);

  for (auto method : s.methods) {
    for (auto [w, a] : s.bits) {
      if (auto reason = illegal_reason(method, w, a)) {
        plan.skipped.push_back({method, w, a, *reason});
        continue;
      }
      for (const auto& arm : arms) {
        auto q = QuantConfig::with_default_policy(method, w, a);
        if (arm) {
          q.quantize_first_layer = arm->quantize_first;
          q.quantize_last_layer = arm->quantize_last;
        }
        const auto spec = ModelSpec::from_name(s.model, q);
        validate(spec);
        auto base = to_json(TrainConfig::defaults(s.dataset, !q.full_precision()));
        base.merge_patch(s.train_overrides);
        for (int rep = 0; rep < s.repetitions; ++rep) {
          PlannedRun run;
          run.dataset = s.dataset;
          run.spec = spec;
          run.config = train_config_from_json(base);
          run.config.seed = s.seed_base + static_cast<std::uint64_t>(rep);
          run.run_id = compute_run_id(s.dataset, spec, run.config, version);
          plan.runs.push_back(std::move(run));
        }
      }
    }
  }
  return plan;
}

TrainResult execute_run(const PlannedRun& run, const Dataset& train_set, const Dataset& test_set,
                        const TrainHooks& hooks) {
  auto network = build_model(run.spec);
  init_parameters(*network, run.config.seed);
  return train(*network, train_set, test_set, run.config, hooks);
}

SweepOutcome run_sweep(const SweepPlan& plan, Registry& registry, int jobs, const RunFunction& run,
                       std::ostream* log) {
  SweepOutcome outcome;
  const auto done = registry.terminal_ids();
  std::vector<const PlannedRun*> todo;
  std::set<std::string> queued;
  for (const auto& r : plan.runs) {
    if (done.count(r.run_id) || !queued.insert(r.run_id).second)
      ++outcome.already_done;
    else
      todo.push_back(&r);
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < todo.size();) {
      const auto& planned = *todo[i];
      const auto label = planned.spec.name() + " " + std::string(to_string(planned.spec.quant.method)) +
                         " " + column_label(planned.spec.quant.weight_bits, planned.spec.quant.act_bits) +
                         " seed " + std::to_string(planned.config.seed);
      try {
        const auto result = run(planned);
        auto record = make_record(planned.dataset, planned.spec, planned.config, result);
        record.run_id = planned.run_id;
        const bool terminal = record.terminal();
        if (terminal) registry.append(record);
        std::lock_guard lock(mu);
        ++outcome.executed;
        if (!terminal) ++outcome.failed;
        if (log)
          *log << label << ": " << to_string(record.status) << " top1 " << fixed2(record.best_top1)
               << " [" << record.run_id << "]\n";
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        ++outcome.executed;
        ++outcome.failed;
        if (log) *log << label << ": failed: " << e.what() << "\n";
      }
    }
  };

  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(todo.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  return outcome;
}

const TableCell& ResultTable::at(const std::string& method, int weight_bits, int act_bits) const {
  for (const auto& c : cells)
    if (c.method == method && c.weight_bits == weight_bits && c.act_bits == act_bits) return c;
  throw ContractError("no table cell " + method + " " + column_label(weight_bits, act_bits));
}

ResultTable build_table(const std::vector<RunRecord>& records, DatasetName dataset,
                        const std::string& model, std::optional<PolicyArm> policy) {
  ResultTable table;
  for (auto m : {QuantMethod::QNN, QuantMethod::DoReFa, QuantMethod::XNORNet, QuantMethod::TWN,
                 QuantMethod::TTQ})
    table.methods.emplace_back(to_string(m));
  for (const auto& method : table.methods) {
    for (auto [w, a] : table_columns()) {
      TableCell cell{method, w, a, "-", 0, 0, 0};
      int completed = 0, failed = 0;
      for (const auto& r : records) {
        const auto& q = r.quant();
        if (r.dataset != dataset || r.spec.name() != model || to_string(q.method) != method ||
            q.weight_bits != w || q.act_bits != a || !matches_policy(q, policy))
          continue;
        if (r.status == RunStatus::Completed) {
          cell.top1 += r.best_top1;
          cell.top5 += r.best_top5;
          ++completed;
        } else if (r.terminal()) {
          ++failed;
        }
      }
      if (completed > 0) {
        cell.status = "ok";
        cell.top1 /= completed;
        cell.top5 /= completed;
        cell.runs = completed;
      } else if (failed > 0) {
        cell.status = "dnc";
        cell.runs = failed;
      }
      table.cells.push_back(cell);
    }
  }
  return table;
}

std::string ResultTable::render() const {
  const auto& cols = table_columns();
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Method"};
  for (auto [w, a] : cols) header.push_back(column_label(w, a));
  rows.push_back(header);
  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::vector<std::string> row{row_label(methods[m])};
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto& cell = cells[m * cols.size() + c];
      if (cell.status == "ok")
        row.push_back(fixed2(cell.top1) + "% (" + fixed2(cell.top5) + "%)");
      else
        row.push_back(cell.status == "dnc" ? "DNC" : "-");
    }
    rows.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::string out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      out += i == 0 ? "" : " | ";
      out += rows[r][i];
      out.append(width[i] - rows[r][i].size(), ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out += std::string(total + 3 * (width.size() - 1), '-') + "\n";
    }
  }
  return out;
}

std::string ResultTable::to_csv() const {
  std::string out = "method,column,weight_bits,act_bits,status,top1,top5,runs\n";
  for (const auto& c : cells) {
    out += c.method + "," + column_label(c.weight_bits, c.act_bits) + "," + std::to_string(c.weight_bits) +
           "," + std::to_string(c.act_bits) + "," + c.status + "," +
           (c.status == "ok" ? shortest(c.top1) : "") + "," + (c.status == "ok" ? shortest(c.top5) : "") +
           "," + std::to_string(c.runs) + "\n";
  }
  return out;
}

std::vector<TableCell> parse_table_csv(const std::string& text) {
  std::vector<TableCell> cells;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 8) throw FormatError("table row has " + std::to_string(f.size()) + " fields: " + line);
    TableCell c;
    c.method = f[0];
    c.weight_bits = std::stoi(f[2]);
    c.act_bits = std::stoi(f[3]);
    c.status = f[4];
    if (!f[5].empty()) std::from_chars(f[5].data(), f[5].data() + f[5].size(), c.top1);
    if (!f[6].empty()) std::from_chars(f[6].data(), f[6].data() + f[6].size(), c.top5);
    c.runs = std::stoi(f[7]);
    cells.push_back(c);
  }
  return cells;
}

PlotData collect_plot_data(const std::vector<RunRecord>& records, DatasetName dataset,
                           const std::string& model, std::optional<QuantMethod> method) {
  struct Acc {
    double sum = 0;
    int n = 0;
  };
  std::map<std::tuple<std::string, int, int>, Acc> acc;
  for (const auto& r : records) {
    const auto& q = r.quant();
    if (r.dataset != dataset || r.spec.name() != model || r.status != RunStatus::Completed ||
        !matches_policy(q, std::nullopt) || (method && q.method != *method))
      continue;
    auto& a = acc[{std::string(to_string(q.method)), q.weight_bits, q.act_bits}];
    a.sum += r.best_top1;
    ++a.n;
  }
  PlotData data;
  std::set<int> wa(kPlotBitAxis.begin(), kPlotBitAxis.end()), aa = wa;
  for (const auto& [key, a] : acc) {
    const auto& [m, w, ab] = key;
    data.grid.push_back({m, w, ab, a.sum / a.n});
    wa.insert(w);
    aa.insert(ab);
  }
  data.weight_axis.assign(wa.begin(), wa.end());
  data.act_axis.assign(aa.begin(), aa.end());
  return data;
}

namespace {

struct Series {
  std::string name;
  std::vector<std::pair<int, double>> points;  // (axis index, top1)
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                          "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22"};

std::string line_chart(const std::string& title, const std::string& xlabel, const std::vector<int>& axis,
                       const std::vector<Series>& series) {
  const double W = 640, H = 420, left = 60, right = 170, top = 40, bottom = 50;
  double lo = 100, hi = 0;
  for (const auto& s : series)
    for (auto [i, v] : s.points) lo = std::min(lo, v), hi = std::max(hi, v);
  if (lo > hi) lo = 0, hi = 100;
  lo = std::floor(lo - 0.5);
  hi = std::min(100.0, std::ceil(hi + 0.5));
  if (hi <= lo) hi = lo + 1;
  const double pw = W - left - right, ph = H - top - bottom;
  auto x = [&](int i) { return left + (axis.size() == 1 ? pw / 2 : pw * i / (axis.size() - 1.0)); };
  auto y = [&](double v) { return top + ph * (hi - v) / (hi - lo); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (std::size_t i = 0; i < axis.size(); ++i)
    o << "<text x=\"" << x(static_cast<int>(i)) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
      << axis[i] << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4;
    o << "<text x=\"" << left - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << fixed2(v) << "</text>\n";
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << y(v) << "\" y2=\"" << y(v)
      << "\" stroke=\"#ddd\"/>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  o << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">top-1 accuracy (%)</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    std::string path;
    for (auto [i, v] : series[s].points)
      path += (path.empty() ? "M" : " L") + shortest(x(i)) + " " + shortest(y(v));
    if (series[s].points.size() > 1)
      o << "<path d=\"" << path << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    for (auto [i, v] : series[s].points)
      o << "<circle cx=\"" << x(i) << "\" cy=\"" << y(v) << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    const double ly = top + 14 + 18 * s;
    o << "<rect x=\"" << left + pw + 12 << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\"" << color
      << "\"/><text x=\"" << left + pw + 28 << "\" y=\"" << ly << "\">" << series[s].name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string heatmap(const std::string& title, const std::vector<int>& waxis, const std::vector<int>& aaxis,
                    const std::vector<PlotPoint>& cells) {
  const double cell = 56, left = 70, top = 50;
  const double W = left + cell * aaxis.size() + 20, H = top + cell * waxis.size() + 50;
  double lo = 100, hi = 0;
  for (const auto& p : cells) lo = std::min(lo, p.top1), hi = std::max(hi, p.top1);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t j = 0; j < aaxis.size(); ++j)
    o << "<text x=\"" << left + cell * (j + 0.5) << "\" y=\"" << top + cell * waxis.size() + 16
      << "\" text-anchor=\"middle\">A" << aaxis[j] << "</text>\n";
  for (std::size_t i = 0; i < waxis.size(); ++i)
    o << "<text x=\"" << left - 8 << "\" y=\"" << top + cell * (i + 0.5) + 4 << "\" text-anchor=\"end\">W"
      << waxis[i] << "</text>\n";
  for (std::size_t i = 0; i < waxis.size(); ++i) {
    for (std::size_t j = 0; j < aaxis.size(); ++j) {
      const auto it = std::find_if(cells.begin(), cells.end(), [&](const PlotPoint& p) {
        return p.weight_bits == waxis[i] && p.act_bits == aaxis[j];
      });
      const double cx = left + cell * j, cy = top + cell * i;
      if (it == cells.end()) {
        o << "<rect x=\"" << cx << "\" y=\"" << cy << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"#f4f4f4\" stroke=\"#fff\"/>\n";
        continue;
      }
      const double t = hi > lo ? (it->top1 - lo) / (hi - lo) : 1.0;
      const int g = static_cast<int>(90 + 130 * t);
      o << "<rect x=\"" << cx << "\" y=\"" << cy << "\" width=\"" << cell << "\" height=\"" << cell
        << "\" fill=\"rgb(" << 255 - g / 2 << "," << g << ",120)\" stroke=\"#fff\"/>\n";
      o << "<text x=\"" << cx + cell / 2 << "\" y=\"" << cy + cell / 2 + 4 << "\" text-anchor=\"middle\">"
        << fixed2(it->top1) << "</text>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

void write_text(const fs::path& path, const std::string& text, std::vector<fs::path>& written) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  written.push_back(path);
}

int axis_index(const std::vector<int>& axis, int v) {
  return static_cast<int>(std::find(axis.begin(), axis.end(), v) - axis.begin());
}

}  // namespace

std::vector<fs::path> export_plots(const PlotData& data, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  std::vector<std::string> methods;
  for (const auto& p : data.grid)
    if (std::find(methods.begin(), methods.end(), p.method) == methods.end()) methods.push_back(p.method);

  // (a) accuracy vs weight bits, one curve per (method, act bits)
  std::vector<Series> wseries;
  std::string wcsv = "method,act_bits,weight_bits,top1\n";
  for (const auto& m : methods) {
    for (int a : data.act_axis) {
      Series s{row_label(m) + " A" + std::to_string(a), {}};
      for (int w : data.weight_axis)
        for (const auto& p : data.grid)
          if (p.method == m && p.weight_bits == w && p.act_bits == a) {
            s.points.emplace_back(axis_index(data.weight_axis, w), p.top1);
            wcsv += m + "," + std::to_string(a) + "," + std::to_string(w) + "," + shortest(p.top1) + "\n";
          }
      if (!s.points.empty()) wseries.push_back(std::move(s));
    }
  }
  write_text(dir / "accuracy_vs_wbits.svg",
             line_chart("Accuracy vs weight bits", "weight bits", data.weight_axis, wseries), written);
  write_text(dir / "accuracy_vs_wbits.csv", wcsv, written);

  // (b) accuracy vs activation bits at W = 1
  std::vector<Series> aseries;
  std::string acsv = "method,weight_bits,act_bits,top1\n";
  for (const auto& m : methods) {
    Series s{row_label(m) + " W1", {}};
    for (int a : data.act_axis)
      for (const auto& p : data.grid)
        if (p.method == m && p.weight_bits == 1 && p.act_bits == a) {
          s.points.emplace_back(axis_index(data.act_axis, a), p.top1);
          acsv += m + ",1," + std::to_string(a) + "," + shortest(p.top1) + "\n";
        }
    if (!s.points.empty()) aseries.push_back(std::move(s));
  }
  write_text(dir / "accuracy_vs_abits_w1.svg",
             line_chart("Accuracy vs activation bits (W = 1)", "activation bits", data.act_axis, aseries),
             written);
  write_text(dir / "accuracy_vs_abits_w1.csv", acsv, written);

  // (c) full W x A grid
  std::string gcsv = "method,weight_bits,act_bits,top1\n";
  for (const auto& m : methods) {
    std::vector<PlotPoint> cells;
    for (const auto& p : data.grid)
      if (p.method == m) {
        cells.push_back(p);
        gcsv += m + "," + std::to_string(p.weight_bits) + "," + std::to_string(p.act_bits) + "," +
                shortest(p.top1) + "\n";
      }
    write_text(dir / ("grid_" + m + ".svg"),
               heatmap(row_label(m) + " W x A accuracy", data.weight_axis, data.act_axis, cells), written);
  }
  write_text(dir / "grid.csv", gcsv, written);
  return written;
}

}  // namespace qcnn
