// Acceptance run: one PASS / FAIL / SKIP line per criterion.
//
// Environment:
//   QCNN_DATA_DIR          MNIST location (root or root/mnist); CIFAR-10 under root/cifar10
//   QCNN_ACCEPT_EPOCHS     epochs for the MNIST runs (default 15)
//   QCNN_ACCEPT_CIFAR=1    also run the hours-scale CIFAR-10 ResNet-20 criterion
//   QCNN_ACCEPT_REGISTRY   where the runs are recorded (default acceptance_runs.jsonl)
#include "qcnn/bitpacked.hpp"
#include "qcnn/errors.hpp"
#include "qcnn/registry.hpp"
#include "quant_checks.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <numeric>

using namespace qcnn;
using namespace qcnn::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  std::string status;  // PASS, FAIL, SKIP
  std::string detail;
};

std::map<int, Verdict> verdicts;

void record(int id, bool pass, const std::string& detail) {
  verdicts[id] = {pass ? "PASS" : "FAIL", detail};
  std::printf("  criterion %d -> %s: %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

void skip(int id, const std::string& detail) {
  verdicts[id] = {"SKIP", detail};
  std::printf("  criterion %d -> SKIP: %s\n", id, detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int env_int(const char* name, int fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::atoi(v) : fallback;
}

// ---------------------------------------------------------------- quantizers

void quantizer_suite() {
  std::mt19937_64 rng(2024);
  const int xnor = xnor_optimality_failures(rng, 1000);
  const int twn_opt = twn_optimality_failures(rng, 1000);
  const int regions = twn_region_failures(rng, 1000);
  const int card = cardinality_failures(rng, 200);
  const int idem = idempotence_failures(rng, 200);
  double ttq = 0;
  for (int i = 0; i < 100; ++i) ttq = std::max(ttq, ttq_scale_gradient_error(rng));
  const bool pass = xnor == 0 && twn_opt == 0 && regions == 0 && card == 0 && idem == 0 && ttq < 1e-2;
  record(6, pass,
         "binary scale optimality failures " + std::to_string(xnor) + "/1000, ternary scale " +
             std::to_string(twn_opt) + "/1000, ternary regions " + std::to_string(regions) +
             "/1000, cardinality " + std::to_string(card) + ", idempotence " + std::to_string(idem) +
             ", TTQ scale gradient max rel err " + fmt("%.2e", ttq));
}

// ------------------------------------------------------------------ autodiff

// One finite-difference case; `kind` cycles through the differentiable ops.
double gradient_case(int kind, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 4);
  const int n = dim(rng), c = dim(rng);
  switch (kind) {
    case 0: {
      const int h = dim(rng) + 3, k = std::uniform_int_distribution<int>(1, 3)(rng);
      const int pad = std::uniform_int_distribution<int>(0, 1)(rng);
      const int stride = (h + 2 * pad - k) % 2 == 0 ? 2 : 1;
      auto x = random_tensor({n, c, h, h}, rng, -1, 1, true);
      auto w = random_tensor({dim(rng), c, k, k}, rng, -1, 1, true);
      auto b = random_tensor({w->dim(0)}, rng, -1, 1, true);
      Probe p{[&](Graph& g) { return conv2d(g, x, w, b, stride, pad); }, {}};
      return std::max({gradient_error(p, x), gradient_error(p, w), gradient_error(p, b)});
    }
    case 1: {
      const int d = dim(rng) + 2;
      auto x = random_tensor({n, d}, rng, -1, 1, true);
      auto w = random_tensor({dim(rng), d}, rng, -1, 1, true);
      auto b = random_tensor({w->dim(0)}, rng, -1, 1, true);
      Probe p{[&](Graph& g) { return linear(g, x, w, b); }, {}};
      return std::max({gradient_error(p, x), gradient_error(p, w), gradient_error(p, b)});
    }
    case 2: {
      auto x = random_tensor({n + 1, c, 3, 3}, rng, -1, 1, true);
      BatchNormBuffers bn{random_tensor({c}, rng, 0.5f, 1.5f, true), random_tensor({c}, rng, -1, 1, true),
                          make_tensor({c}), make_tensor({c}, 1.0f)};
      Probe p{[&](Graph& g) { return batch_norm(g, x, bn, true); }, {}};
      return std::max({gradient_error(p, x), gradient_error(p, bn.gamma), gradient_error(p, bn.beta)});
    }
    case 3: {
      const int k = dim(rng) + 1;
      auto logits = random_tensor({n, k}, rng, -2, 2, true);
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (auto& l : labels) l = std::uniform_int_distribution<int>(0, k - 1)(rng);
      Probe p{[&](Graph& g) { return softmax_cross_entropy(g, logits, labels); }, {}};
      return gradient_error(p, logits);
    }
    case 4: {
      auto x = random_tensor({n, c, 3, 3}, rng, -1, 1, true);
      auto bias = random_tensor({c}, rng, -1, 1, true);
      ArrayXs scale = ArrayXs::Random(c) * 2.0f;
      Probe p{[&](Graph& g) {
                return flatten(g, global_avg_pool(g, add_channel_bias(g, scale_channels(g, x, scale), bias)));
              },
              {}};
      return std::max(gradient_error(p, x), gradient_error(p, bias));
    }
    case 5: {
      // relu / hardtanh / mul / add with inputs kept clear of the kinks
      const int len = 4 * n * c;
      auto x = random_tensor({len}, rng, 0.05f, 0.9f, true);
      std::bernoulli_distribution flip(0.5);
      for (auto& v : x->span()) v = flip(rng) ? -v : v;
      auto y = random_tensor({len}, rng, 0.1f, 1.0f, true);
      Probe p{[&](Graph& g) { return add(g, mul(g, relu(g, x), y), hardtanh(g, mul(g, x, y))); }, {}};
      return std::max(gradient_error(p, x), gradient_error(p, y));
    }
    default: {
      // pools over well-separated values so no maximum is tied within the step
      const int h = 2 * dim(rng);
      auto x = make_tensor({n, c, h, h});
      std::vector<int> perm(x->size());
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t i = 0; i < perm.size(); ++i) (*x)[i] = 0.1f * static_cast<float>(perm[i]) - 1.0f;
      x->set_requires_grad(true);
      const auto kind_pool = kind == 6 ? PoolKind::Max : PoolKind::Avg;
      Probe p{[&](Graph& g) { return pool2d(g, x, kind_pool, 2, 2); }, {}};
      return gradient_error(p, x);
    }
  }
}

void autodiff_suite() {
  std::mt19937_64 rng(77);
  double worst_grad = 0;
  int grad_fail = 0;
  for (int i = 0; i < 100; ++i) {
    const double e = gradient_case(i % 8, rng);
    worst_grad = std::max(worst_grad, e);
    grad_fail += e >= 1e-2;
  }

  double worst_fwd = 0;
  std::uniform_int_distribution<int> dim(1, 8);
  for (int i = 0; i < 100; ++i) {
    Graph g(false);
    const int n = std::min(dim(rng), 3), c = dim(rng);
    const int h = std::max(dim(rng), 3), k = std::uniform_int_distribution<int>(1, std::min(h, 5))(rng);
    const int pad = std::uniform_int_distribution<int>(0, 2)(rng);
    int stride = std::uniform_int_distribution<int>(1, 2)(rng);
    if ((h + 2 * pad - k) % stride != 0) stride = 1;
    auto x = random_tensor({n, c, h, h}, rng);
    auto w = random_tensor({dim(rng), c, k, k}, rng);
    auto b = random_tensor({w->dim(0)}, rng);
    worst_fwd = std::max(worst_fwd, max_abs_diff(*conv2d(g, x, w, b, stride, pad), naive_conv2d(*x, *w, b.get(), stride, pad)));

    auto xi = random_tensor({n, dim(rng)}, rng);
    auto wl = random_tensor({dim(rng), xi->dim(1)}, rng);
    auto bl = random_tensor({wl->dim(0)}, rng);
    worst_fwd = std::max(worst_fwd, max_abs_diff(*linear(g, xi, wl, bl), naive_linear(*xi, *wl, bl.get())));

    const int ph = 2 * std::max(1, dim(rng) / 2);
    auto xp = random_tensor({n, c, ph, ph}, rng);
    worst_fwd = std::max(worst_fwd, max_abs_diff(*pool2d(g, xp, PoolKind::Max, 2, 2), naive_pool(*xp, true, 2, 2)));
    worst_fwd = std::max(worst_fwd, max_abs_diff(*pool2d(g, xp, PoolKind::Avg, 2, 2), naive_pool(*xp, false, 2, 2)));
  }
  record(7, grad_fail == 0 && worst_fwd <= 1e-5,
         std::to_string(100 - grad_fail) + "/100 gradient cases within 1e-2 (worst " + fmt("%.2e", worst_grad) +
             "), conv/linear/pool forward vs loop oracles worst abs diff " + fmt("%.2e", worst_fwd));
}

// ------------------------------------------------------------------ bitpacked

struct BitpackedParts {
  bool dots_exact = false;
  std::string detail;
};

BitpackedParts dot_product_check() {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> len(1, 600);
  std::bernoulli_distribution coin(0.5);
  int mismatches = 0;
  for (int t = 0; t < 10000; ++t) {
    const int n = len(rng);
    std::vector<float> a(static_cast<std::size_t>(n)), b(a.size());
    long ref = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = coin(rng) ? 1.0f : -1.0f;
      b[i] = coin(rng) ? 1.0f : -1.0f;
      ref += static_cast<long>(a[i]) * static_cast<long>(b[i]);
    }
    const auto pa = pack(a, Shape{n}), pb = pack(b, Shape{n});
    mismatches += xnor_popcount_dot(pa, pb) != ref;
  }
  return {mismatches == 0, std::to_string(10000 - mismatches) + "/10000 packed dot products exact"};
}

// ------------------------------------------------------------- policy arms

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && (a.values() == b.values()).all();
}

void policy_arms(const Dataset* train_set, const Dataset* test_set) {
  std::mt19937_64 rng(91);
  int built = 0, trained = 0, identity = 0, arms = 0;
  std::string notes;
  for (auto method : {QuantMethod::QNN, QuantMethod::DoReFa}) {
    for (bool qf : {false, true}) {
      for (bool ql : {false, true}) {
        ++arms;
        auto q = QuantConfig::with_default_policy(method, 1, 2);
        q.quantize_first_layer = qf;
        q.quantize_last_layer = ql;
        std::unique_ptr<Network> net;
        try {
          net = build_model(ModelSpec::lenet5(q));
          init_parameters(*net, 5);
          ++built;
        } catch (const std::exception& e) {
          notes += " build failed: " + std::string(e.what());
          continue;
        }

        auto layers = net->weighted_layers();
        auto* first = dynamic_cast<QuantConv2d*>(layers.front());
        auto* last = dynamic_cast<QuantLinear*>(layers.back());
        bool ok = first && last && layers.front()->quant().full_precision() == !qf &&
                  layers.back()->quant().full_precision() == !ql && !layers[1]->quant().full_precision();
        if (ok) {
          Graph g(false);
          auto x = random_tensor({2, 1, 28, 28}, rng);
          auto h = random_tensor({2, 84}, rng);
          const bool first_plain = bit_equal(*first->forward(g, x), *conv2d(g, x, first->shadow_weights(), nullptr, 1, 2));
          const bool last_plain = bit_equal(*last->forward(g, h), *linear(g, h, last->shadow_weights(), last->bias()));
          ok = first_plain == !qf && last_plain == !ql;
        }
        identity += ok;

        if (train_set) {
          TrainConfig c;
          c.optimizer = OptimizerKind::Adam;
          c.initial_lr = method == QuantMethod::QNN ? 5e-3 : 1e-3;
          c.epochs = 2;
          c.train_limit = 2000;
          c.schedule.kind = ScheduleKind::Constant;
          const auto r = train(*net, *train_set, test_set->head(1000), c);
          const bool learned = r.history.size() == 2 && std::isfinite(r.history[1].train_loss) &&
                               r.history[1].train_loss < r.history[0].train_loss &&
                               r.status != RunStatus::Diverged;
          trained += learned;
          notes += " " + std::string(to_string(method)) + (qf ? " Qfirst" : " FPfirst") + (ql ? "/Qlast" : "/FPlast") +
                   " loss " + fmt("%.3f", r.history.empty() ? 0.0 : r.history.front().train_loss) + "->" +
                   fmt("%.3f", r.history.empty() ? 0.0 : r.history.back().train_loss) + ";";
        }
      }
    }
  }
  const std::string summary = std::to_string(built) + "/" + std::to_string(arms) + " arms built, " +
                              std::to_string(identity) + "/" + std::to_string(arms) + " exemption identities hold";
  if (!train_set) {
    record(9, false, summary + "; MNIST missing so the training smoke test could not run");
    return;
  }
  record(9, built == arms && identity == arms && trained == arms,
         summary + ", " + std::to_string(trained) + "/" + std::to_string(arms) + " trained on 2000 samples:" + notes);
}

// -------------------------------------------------------------- MNIST runs

struct Run {
  RunRecord record;
  std::unique_ptr<Network> net;
  double final_top1 = 0;
};

Run train_lenet(QuantConfig q, TrainConfig c, const Dataset& train_set, const Dataset& test_set, Registry& registry) {
  const auto spec = ModelSpec::lenet5(q);
  Run run;
  run.net = build_model(spec);
  init_parameters(*run.net, c.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(*run.net, train_set, test_set, c);
  run.record = make_record(DatasetName::MNIST, spec, c, result);
  registry.append(run.record);
  run.final_top1 = result.history.empty() ? 0 : result.history.back().test_top1;
  std::printf("  trained %s %s: best top1 %.2f%% (final %.2f%%), %s, %.0fs\n",
              std::string(to_string(q.method)).c_str(), column_label(q.weight_bits, q.act_bits).c_str(),
              run.record.best_top1, run.final_top1, std::string(to_string(run.record.status)).c_str(),
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::fflush(stdout);
  return run;
}

TrainConfig sgd_config(int epochs) {
  TrainConfig c;
  c.optimizer = OptimizerKind::SgdMomentum;
  c.initial_lr = 0.05;
  c.weight_decay = 1e-4;
  c.epochs = epochs;
  c.schedule.kind = ScheduleKind::Cosine;
  return c;
}

TrainConfig adam_config(double lr, int epochs) {
  TrainConfig c;
  c.optimizer = OptimizerKind::Adam;
  c.initial_lr = lr;
  c.weight_decay = 0;
  c.epochs = epochs;
  c.schedule.kind = ScheduleKind::Cosine;
  return c;
}

constexpr double kQnnLr = 5e-3;
constexpr double kDorefaLr = 3e-3;     // W/A grid
constexpr double kDorefaBwnLr = 1e-3;  // W1A32

std::string binary_check(const char* label, Network& net, const Dataset& test_set, bool& ok) {
  const auto model = export_binary_model(net);
  const double fp = evaluate(net, test_set).top1;
  const double bp = evaluate_binary(model, test_set, 1);
  const auto p = model.payload();
  const bool close = std::abs(fp - bp) <= 0.05 + 1e-9;
  const bool ratio = p.binary_weights > 0 && p.packed_bits == p.binary_weights &&
                     p.packed_bytes() * 32.0 == p.float_equivalent_bytes();
  ok = ok && close && ratio;
  return std::string(label) + " float " + fmt("%.2f", fp) + "% vs packed " + fmt("%.2f", bp) + "% (|diff| " +
         fmt("%.2f", std::abs(fp - bp)) + "), payload " + fmt("%.0f", p.packed_bytes()) + " B for " +
         fmt("%.0f", p.float_equivalent_bytes()) + " B of float32 weights (ratio 1/" +
         fmt("%.1f", p.float_equivalent_bytes() / p.packed_bytes()) + ")";
}

void mnist_criteria(const Dataset& train_set, const Dataset& test_set, Registry& registry,
                    const BitpackedParts& dots) {
  const int epochs = env_int("QCNN_ACCEPT_EPOCHS", 15);
  std::printf("  MNIST runs: %d epochs, batch 128, seed 1\n", epochs);

  auto fp = train_lenet(QuantConfig::with_default_policy(QuantMethod::DoReFa, 32, 32), sgd_config(epochs),
                        train_set, test_set, registry);
  record(1, epochs <= 30 && fp.record.best_top1 >= 99.0,
         "LeNet-5 W32A32 top1 " + fmt("%.2f", fp.record.best_top1) + "% after " + std::to_string(epochs) +
             " epochs (need >= 99.00)");

  auto dr132 = train_lenet(QuantConfig::with_default_policy(QuantMethod::DoReFa, 1, 32), adam_config(kDorefaBwnLr, epochs),
                           train_set, test_set, registry);
  const double gap = fp.record.best_top1 - dr132.record.best_top1;
  record(2, dr132.record.best_top1 >= 98.8 && gap <= 0.7,
         "DoReFa W1A32 top1 " + fmt("%.2f", dr132.record.best_top1) + "% (need >= 98.80), gap to FP " +
             fmt("%.2f", gap) + " (need <= 0.70)");

  std::map<std::pair<std::string, std::string>, Run> grid;
  for (auto method : {QuantMethod::QNN, QuantMethod::DoReFa})
    for (auto [w, a] : std::vector<std::pair<int, int>>{{1, 1}, {1, 2}, {2, 1}, {2, 2}})
      grid[{std::string(to_string(method)), column_label(w, a)}] =
          train_lenet(QuantConfig::with_default_policy(method, w, a),
                      adam_config(method == QuantMethod::QNN ? kQnnLr : kDorefaLr, epochs), train_set, test_set,
                      registry);
  auto top1 = [&](const char* m, const char* col) { return grid.at({m, col}).record.best_top1; };

  const double qnn11 = top1("QNN", "W1A1"), dr12 = top1("DoReFa", "W1A2");
  record(3, qnn11 >= 97.5 && dr12 >= 98.5,
         "QNN W1A1 top1 " + fmt("%.2f", qnn11) + "% (need >= 97.50), DoReFa W1A2 top1 " + fmt("%.2f", dr12) +
             "% (need >= 98.50)");

  bool ordered = true;
  std::string detail;
  for (const char* m : {"QNN", "DoReFa"}) {
    const double a11 = top1(m, "W1A1"), a12 = top1(m, "W1A2"), a21 = top1(m, "W2A1"), a22 = top1(m, "W2A2");
    ordered = ordered && a11 <= a12 + 0.3 && a21 <= a22 + 0.3;
    detail += std::string(detail.empty() ? "" : "; ") + m + " W1A1 " + fmt("%.2f", a11) + " vs W1A2 " +
              fmt("%.2f", a12) + ", W2A1 " + fmt("%.2f", a21) + " vs W2A2 " + fmt("%.2f", a22);
  }
  record(4, ordered, detail + " (margin 0.30)");

  bool ok = dots.dots_exact;
  std::string d8 = dots.detail;
  d8 += "; " + binary_check("QNN W1A1", *grid.at({"QNN", "W1A1"}).net, test_set, ok);
  d8 += "; " + binary_check("DoReFa W1A32", *dr132.net, test_set, ok);
  record(8, ok, d8);
}

std::optional<std::pair<Dataset, Dataset>> try_load(DatasetName name) {
  try {
    return load_dataset(name, dataset_dir(resolve_data_dir(""), name));
  } catch (const DataMissingError& e) {
    return std::nullopt;
  }
}

void cifar_criterion(Registry& registry) {
  const auto data = try_load(DatasetName::CIFAR10);
  if (!data) {
    skip(5, "CIFAR-10 binary batches not found under the data root; the ResNet-20 runs were not attempted");
    return;
  }
  if (env_int("QCNN_ACCEPT_CIFAR", 0) != 1) {
    skip(5, "CIFAR-10 present but the hours-scale ResNet-20 runs need QCNN_ACCEPT_CIFAR=1");
    return;
  }
  auto run = [&](QuantConfig q) {
    auto c = TrainConfig::defaults(DatasetName::CIFAR10, !q.full_precision());
    c.epochs = 60;
    c.initial_lr = 0.1;
    const auto spec = ModelSpec::resnet(20, q);
    auto net = build_model(spec);
    init_parameters(*net, c.seed);
    auto rec = make_record(DatasetName::CIFAR10, spec, c, train(*net, data->first, data->second, c));
    registry.append(rec);
    return rec.best_top1;
  };
  const double fp = run(QuantConfig::with_default_policy(QuantMethod::DoReFa, 32, 32));
  const double w1 = run(QuantConfig::with_default_policy(QuantMethod::DoReFa, 1, 32));
  record(5, fp >= 88.0 && fp - w1 <= 2.5,
         "ResNet-20 W32A32 top1 " + fmt("%.2f", fp) + "% (need >= 88.00), DoReFa W1A32 gap " + fmt("%.2f", fp - w1) +
             " (need <= 2.50)");
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const char* reg_env = std::getenv("QCNN_ACCEPT_REGISTRY");
  Registry registry(reg_env && *reg_env ? fs::path(reg_env) : fs::path("acceptance_runs.jsonl"));
  std::printf("acceptance: code version %s, registry %s\n", code_version().c_str(), registry.path().c_str());

  quantizer_suite();
  autodiff_suite();
  const auto dots = dot_product_check();

  const auto mnist = try_load(DatasetName::MNIST);
  policy_arms(mnist ? &mnist->first : nullptr, mnist ? &mnist->second : nullptr);
  if (mnist) {
    mnist_criteria(mnist->first, mnist->second, registry, dots);
  } else {
    for (int id : {1, 2, 3, 4}) record(id, false, "MNIST not found (set QCNN_DATA_DIR)");
    record(8, false, dots.detail + "; MNIST not found, the model-level checks could not run");
  }
  cifar_criterion(registry);

  std::printf("\n");
  bool all = true;
  for (int id = 1; id <= 9; ++id) {
    const auto& v = verdicts.at(id);
    std::printf("criterion %d: %s  %s\n", id, v.status.c_str(), v.detail.c_str());
    all = all && v.status != "FAIL";
  }
  std::printf("acceptance finished in %.0fs\n",
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return all ? 0 : 1;
}
