// qcnn: train, sweep, evaluate and export quantized CNNs.
#include "qcnn/bitpacked.hpp"
#include "qcnn/errors.hpp"
#include "qcnn/registry.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

using namespace qcnn;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitDataMissing = 3;

struct ModelFlags {
  std::string dataset = "mnist";
  std::string model;
  std::string method = "qnn";
  int wbits = 32;
  int abits = 32;
  std::string quantize_first, quantize_last;  // "", "true" or "false"
};

struct TrainFlags {
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<std::string> optimizer;
  std::optional<std::string> schedule;
  std::optional<double> weight_decay;
  std::optional<int> batch_size;
  std::uint64_t seed = 1;
  int train_limit = 0;
  int search_epochs = 3;
  std::string checkpoint;
};

struct Common {
  std::string data_dir;
  std::string registry;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--dataset", f.dataset, "mnist or cifar10")->check(CLI::IsMember({"mnist", "cifar10"}));
  cmd->add_option("--model", f.model, "lenet5 or resnetN (default by dataset)");
  cmd->add_option("--method", f.method, "qnn, dorefa, xnornet, twn, ttq");
  cmd->add_option("--wbits", f.wbits, "weight bits");
  cmd->add_option("--abits", f.abits, "activation bits");
  cmd->add_option("--quantize-first", f.quantize_first, "quantize the first layer")
      ->check(CLI::IsMember({"true", "false"}));
  cmd->add_option("--quantize-last", f.quantize_last, "quantize the last layer")
      ->check(CLI::IsMember({"true", "false"}));
}

std::string default_model(DatasetName d) { return d == DatasetName::MNIST ? "lenet5" : "resnet20"; }

ModelSpec model_from_flags(const ModelFlags& f) {
  const auto dataset = parse_dataset(f.dataset);
  auto q = QuantConfig::with_default_policy(parse_method(f.method), f.wbits, f.abits);
  if (!f.quantize_first.empty()) q.quantize_first_layer = f.quantize_first == "true";
  if (!f.quantize_last.empty()) q.quantize_last_layer = f.quantize_last == "true";
  validate(q);
  auto spec = ModelSpec::from_name(f.model.empty() ? default_model(dataset) : f.model, q);
  validate(spec);
  return spec;
}

std::pair<Dataset, Dataset> load(DatasetName dataset, const std::string& data_dir) {
  return load_dataset(dataset, dataset_dir(resolve_data_dir(data_dir), dataset));
}

void print_metrics(const RunRecord& r) {
  std::printf("%s %s %s %s: status %s, best top1 %.2f%%, top5 %.2f%% (run %s)\n",
              std::string(to_string(r.dataset)).c_str(), r.spec.name().c_str(),
              std::string(to_string(r.quant().method)).c_str(),
              column_label(r.quant().weight_bits, r.quant().act_bits).c_str(),
              std::string(to_string(r.status)).c_str(), r.best_top1, r.best_top5, r.run_id.c_str());
}

int cmd_train(const ModelFlags& mf, const TrainFlags& tf, const Common& common) {
  const auto dataset = parse_dataset(mf.dataset);
  const auto spec = model_from_flags(mf);
  auto config = TrainConfig::defaults(dataset, !spec.quant.full_precision());
  if (tf.epochs) config.epochs = *tf.epochs;
  if (tf.lr) config.initial_lr = *tf.lr;
  if (tf.optimizer) config.optimizer = parse_optimizer(*tf.optimizer);
  if (tf.schedule) config.schedule.kind = parse_schedule(*tf.schedule);
  if (tf.weight_decay) config.weight_decay = *tf.weight_decay;
  if (tf.batch_size) config.batch_size = *tf.batch_size;
  config.seed = tf.seed;
  config.train_limit = tf.train_limit;

  auto [train_set, test_set] = load(dataset, common.data_dir);

  if (!tf.lr && !tf.optimizer) {
    std::printf("searching optimizer x learning rate (%d epochs each)\n", tf.search_epochs);
    const auto search = hyperparameter_search(spec, train_set, test_set, SearchGrid{}, tf.search_epochs, config);
    for (const auto& p : search.points)
      std::printf("  %-12s lr %-6g %-9s top1 %.2f%%\n", std::string(to_string(p.optimizer)).c_str(), p.lr,
                  std::string(to_string(p.status)).c_str(), p.best_top1);
    if (search.selected) {
      config = *search.selected;
    } else {
      std::printf("%s\nkeeping the default optimizer and learning rate\n", search.failure_report().c_str());
    }
  }
  std::printf("training %s with %s lr %g for %d epochs\n", spec.name().c_str(),
              std::string(to_string(config.optimizer)).c_str(), config.initial_lr, config.epochs);

  TrainHooks hooks;
  hooks.verbose = true;
  if (!tf.checkpoint.empty()) hooks.best_checkpoint = tf.checkpoint;
  const PlannedRun run{dataset, spec, config, compute_run_id(dataset, spec, config, code_version())};
  const auto result = execute_run(run, train_set, test_set, hooks);
  const auto record = make_record(dataset, spec, config, result);
  Registry registry(resolve_registry_path(common.registry));
  registry.append(record);
  print_metrics(record);
  if (!result.message.empty()) std::printf("%s\n", result.message.c_str());
  return 0;
}

int cmd_sweep(const std::string& spec_path, int jobs, bool dry_run, const Common& common) {
  std::ifstream in(spec_path);
  if (!in) throw ConfigError("cannot read sweep spec " + spec_path);
  const auto spec = sweep_spec_from_json(Json::parse(in));
  const auto plan = plan_sweep(spec, code_version());
  for (const auto& s : plan.skipped)
    std::printf("skip %s %s: %s\n", std::string(to_string(s.method)).c_str(),
                column_label(s.weight_bits, s.act_bits).c_str(), s.reason.c_str());
  Registry registry(resolve_registry_path(common.registry));
  const auto done = registry.terminal_ids();
  int pending = 0;
  for (const auto& r : plan.runs) pending += done.count(r.run_id) ? 0 : 1;
  std::printf("%zu runs planned, %d pending, %zu skipped\n", plan.runs.size(), pending, plan.skipped.size());
  if (dry_run || pending == 0) return 0;

  auto [train_set, test_set] = load(spec.dataset, common.data_dir);
  const auto outcome = run_sweep(
      plan, registry, jobs,
      [&](const PlannedRun& r) { return execute_run(r, train_set, test_set); }, &std::cout);
  std::printf("executed %d, already done %d, failed %d\n", outcome.executed, outcome.already_done,
              outcome.failed);
  return outcome.failed == 0 ? 0 : 1;
}

int cmd_eval(const std::string& checkpoint, const std::string& binary, const std::string& dataset_name,
             const Common& common) {
  const auto dataset = parse_dataset(dataset_name);
  if (!binary.empty()) {
    const auto model = BinaryModel::load(binary);
    auto [train_set, test_set] = load(dataset, common.data_dir);
    std::printf("%s (bit-packed): top1 %.2f%% top5 %.2f%%\n", model.model_name.c_str(),
                evaluate_binary(model, test_set, 1), evaluate_binary(model, test_set, 5));
    return 0;
  }
  if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --binary");
  auto network = build_model(checkpoint_model_spec(checkpoint));
  load_checkpoint(checkpoint, *network);
  auto [train_set, test_set] = load(dataset, common.data_dir);
  const auto acc = evaluate(*network, test_set);
  std::printf("%s: top1 %.2f%% top5 %.2f%%\n", network->spec().name().c_str(), acc.top1, acc.top5);
  return 0;
}

int cmd_export_table(const std::string& dataset_name, const std::string& model, const std::string& out,
                     const Common& common) {
  const auto dataset = parse_dataset(dataset_name);
  Registry registry(resolve_registry_path(common.registry));
  const auto table = build_table(registry.latest(), dataset, model.empty() ? default_model(dataset) : model);
  std::cout << table.render();
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << table.to_csv();
    std::printf("wrote %s\n", out.c_str());
  }
  return 0;
}

int cmd_export_plots(const std::string& dataset_name, const std::string& model, const std::string& method,
                     const std::string& out_dir, const Common& common) {
  const auto dataset = parse_dataset(dataset_name);
  Registry registry(resolve_registry_path(common.registry));
  std::optional<QuantMethod> m;
  if (!method.empty()) m = parse_method(method);
  const auto data =
      collect_plot_data(registry.latest(), dataset, model.empty() ? default_model(dataset) : model, m);
  if (data.grid.empty()) {
    std::printf("no completed records match; nothing to plot\n");
    return 0;
  }
  for (const auto& p : export_plots(data, out_dir)) std::printf("wrote %s\n", p.c_str());
  return 0;
}

int cmd_export_binary(const std::string& checkpoint, const std::string& out, bool verify, bool bench,
                      const std::string& dataset_name, const Common& common) {
  auto network = build_model(checkpoint_model_spec(checkpoint));
  load_checkpoint(checkpoint, *network);
  const auto model = export_binary_model(*network);
  model.save(out);
  const auto payload = model.payload();
  std::printf("wrote %s: %zu bytes; %zu binary weights in %.0f bytes (%.0f as float32), %zu float weights\n",
              out.c_str(), static_cast<std::size_t>(fs::file_size(out)), payload.binary_weights,
              payload.packed_bytes(), payload.float_equivalent_bytes(), payload.float_weights);
  if (!verify && !bench) return 0;

  auto [train_set, test_set] = load(parse_dataset(dataset_name), common.data_dir);
  if (verify) {
    const double fp = evaluate(*network, test_set).top1;
    const double bp = evaluate_binary(model, test_set, 1);
    std::printf("float path top1 %.2f%%, bit-packed top1 %.2f%%, difference %.2f\n", fp, bp, bp - fp);
  }
  if (bench) {
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    predict(*network, test_set);
    const double float_s = std::chrono::duration<double>(clock::now() - t0).count();
    t0 = clock::now();
    evaluate_binary(model, test_set, 1);
    const double packed_s = std::chrono::duration<double>(clock::now() - t0).count();
    std::printf("throughput on %d images: float %.0f img/s, bit-packed %.0f img/s, ratio %.2f\n",
                test_set.size(), test_set.size() / float_s, test_set.size() / packed_s, float_s / packed_s);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantized CNN training, sweeps and bit-packed export"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--data-dir", common.data_dir, "dataset root (env QCNN_DATA_DIR)");
    cmd->add_option("--registry", common.registry, "run registry file (env QCNN_REGISTRY)");
  };

  ModelFlags mf;
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train one configuration and record it");
  add_model_flags(train, mf);
  add_common(train);
  train->add_option("--epochs", tf.epochs);
  train->add_option("--lr", tf.lr, "pins the learning rate (skips the search)");
  train->add_option("--optimizer", tf.optimizer, "sgd or adam (skips the search)");
  train->add_option("--schedule", tf.schedule, "step, cosine or constant");
  train->add_option("--weight-decay", tf.weight_decay);
  train->add_option("--batch-size", tf.batch_size);
  train->add_option("--seed", tf.seed);
  train->add_option("--train-limit", tf.train_limit, "train on the first N samples");
  train->add_option("--search-epochs", tf.search_epochs, "epochs per search point");
  train->add_option("--checkpoint", tf.checkpoint, "write the best checkpoint here");

  std::string sweep_spec;
  int jobs = 1;
  bool dry_run = false;
  auto* sweep = app.add_subcommand("sweep", "run every legal configuration of a sweep spec");
  sweep->add_option("spec", sweep_spec, "sweep spec JSON")->required();
  sweep->add_option("--jobs", jobs, "concurrent runs")->check(CLI::PositiveNumber);
  sweep->add_flag("--dry-run", dry_run, "print the plan only");
  add_common(sweep);

  std::string checkpoint, binary, out, dataset = "mnist", model, method;
  bool verify = false, bench = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or bit-packed model on the test split");
  eval->add_option("--checkpoint", checkpoint);
  eval->add_option("--binary", binary);
  eval->add_option("--dataset", dataset);
  add_common(eval);

  auto* table = app.add_subcommand("export-table", "methods x (W, A) result table");
  table->add_option("--dataset", dataset);
  table->add_option("--model", model);
  table->add_option("--out", out, "CSV file");
  add_common(table);

  std::string out_dir = "plots";
  auto* plots = app.add_subcommand("export-plots", "accuracy curves and W x A grids (SVG + CSV)");
  plots->add_option("--dataset", dataset);
  plots->add_option("--model", model);
  plots->add_option("--method", method);
  plots->add_option("--out-dir", out_dir);
  add_common(plots);

  auto* binexp = app.add_subcommand("export-binary", "pack a 1-bit checkpoint for XNOR-popcount inference");
  binexp->add_option("--checkpoint", checkpoint)->required();
  binexp->add_option("--out", out)->required();
  binexp->add_option("--dataset", dataset);
  binexp->add_flag("--verify", verify, "compare test top1 with the float path");
  binexp->add_flag("--bench", bench, "time both paths on the test split");
  add_common(binexp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(mf, tf, common);
    if (*sweep) return cmd_sweep(sweep_spec, jobs, dry_run, common);
    if (*eval) return cmd_eval(checkpoint, binary, dataset, common);
    if (*table) return cmd_export_table(dataset, model, out, common);
    if (*plots) return cmd_export_plots(dataset, model, method, out_dir, common);
    if (*binexp) return cmd_export_binary(checkpoint, out, verify, bench, dataset, common);
  } catch (const DataMissingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDataMissing;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
