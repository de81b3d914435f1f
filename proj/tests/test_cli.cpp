#include "qcnn/registry.hpp"
#include "support.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>

using namespace qcnn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + QCNN_CLI_PATH + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) o.output.append(buf, n);
  const int status = ::pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

fs::path workdir() {
  auto dir = fs::temp_directory_path() / ("qcnn_cli_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("train --bogus").code == 2);
  CHECK(run("nonsense").code == 2);
  CHECK(run("").code == 2);
  CHECK(run("train --quantize-first maybe").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("illegal configurations cite the violated constraint") {
  const auto o = run("train --method ttq --wbits 3 --abits 32");
  CHECK(o.code == 2);
  CHECK(o.output.find("ternary") != std::string::npos);
  const auto x = run("train --method xnornet --wbits 2 --abits 32");
  CHECK(x.code == 2);
}

TEST_CASE("missing data exits 3 with retrieval instructions") {
  const auto dir = workdir() / "empty";
  fs::create_directories(dir);
  const auto o = run("train --method dorefa --wbits 1 --abits 32 --lr 0.01 --data-dir " + dir.string());
  CHECK(o.code == 3);
  CHECK(o.output.find("train-images-idx3-ubyte") != std::string::npos);
  const auto e = run("train --method dorefa --wbits 1 --lr 0.01", "QCNN_DATA_DIR=" + dir.string());
  CHECK(e.code == 3);
}

TEST_CASE("sweep dry run reports the skip set") {
  const auto dir = workdir();
  const auto spec = dir / "twn.json";
  std::ofstream(spec) << R"({"dataset":"mnist","model":"lenet5","methods":["twn","dorefa"],"bits":[[8,8],[2,32]]})";
  const auto o = run("sweep " + spec.string() + " --dry-run --registry " + (dir / "dry.jsonl").string());
  CHECK(o.code == 0);
  CHECK(o.output.find("skip TWN W8A8") != std::string::npos);
  CHECK(o.output.find("3 runs planned") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "dry.jsonl"));
}

TEST_CASE("train, export and evaluate on MNIST") {
  const auto data = testing::mnist_dir();
  if (data.empty()) {
    MESSAGE("MNIST not available; skipping");
    return;
  }
  const auto dir = workdir();
  const auto reg = dir / "runs.jsonl";
  fs::remove(reg);
  const std::string common = " --data-dir " + data.string() + " --registry " + reg.string();

  auto o = run("train --dataset mnist --model lenet5 --method dorefa --wbits 1 --abits 32 --epochs 1"
               " --optimizer adam --lr 0.001 --train-limit 3000 --checkpoint " +
               (dir / "d.qcf").string() + common);
  REQUIRE(o.code == 0);
  auto records = Registry(reg).read();
  REQUIRE(records.size() == 1);
  CHECK(records[0].quant().method == QuantMethod::DoReFa);
  CHECK(records[0].quant().weight_bits == 1);
  CHECK(records[0].quant().act_bits == 32);
  CHECK(records[0].config.epochs == 1);
  CHECK(records[0].config.train_limit == 3000);
  CHECK(records[0].status == RunStatus::Completed);
  CHECK(records[0].best_top1 > 50.0);

  // XNOR-Net with full-precision activations is the binary-weight variant.
  o = run("train --method xnornet --wbits 1 --abits 32 --epochs 1 --optimizer adam --lr 0.001"
          " --train-limit 1000" + common);
  REQUIRE(o.code == 0);
  records = Registry(reg).read();
  REQUIRE(records.size() == 2);
  CHECK(records[1].quant().method == QuantMethod::XNORNet);
  CHECK(records[1].quant().act_bits == 32);
  auto bwn = build_model(records[1].spec);
  for (auto* layer : bwn->quant_layers()) CHECK_FALSE(layer->quant().acts_quantized());

  // lr 0 never leaves chance level: a DNC is a result, exit 0.
  o = run("train --method qnn --wbits 1 --abits 1 --epochs 2 --optimizer sgd --lr 0 --train-limit 500" + common);
  CHECK(o.code == 0);
  records = Registry(reg).read();
  REQUIRE(records.size() == 3);
  CHECK(records[2].status == RunStatus::DNC);

  o = run("export-table --out " + (dir / "t.csv").string() + common);
  CHECK(o.code == 0);
  CHECK(o.output.find("DNC") != std::string::npos);
  std::ifstream csv(dir / "t.csv");
  const std::string text((std::istreambuf_iterator<char>(csv)), std::istreambuf_iterator<char>());
  const auto cells = parse_table_csv(text);
  const auto table = build_table(Registry(reg).latest(), DatasetName::MNIST, "lenet5");
  REQUIRE(cells.size() == table.cells.size());
  CHECK(cells.size() == 45);
  CHECK(build_table(Registry(reg).latest(), DatasetName::MNIST, "lenet5").at("DoReFa", 1, 32).top1 ==
        records[0].best_top1);

  o = run("export-plots --out-dir " + (dir / "plots").string() + common);
  CHECK(o.code == 0);
  CHECK(fs::exists(dir / "plots" / "grid.csv"));

  o = run("eval --checkpoint " + (dir / "d.qcf").string() + common);
  CHECK(o.code == 0);
  char expect[32];
  std::snprintf(expect, sizeof expect, "top1 %.2f%%", records[0].best_top1);
  CHECK(o.output.find(expect) != std::string::npos);

  o = run("export-binary --checkpoint " + (dir / "d.qcf").string() + " --out " + (dir / "d.qbm").string() +
          " --verify" + common);
  CHECK(o.code == 0);
  CHECK(o.output.find("difference 0.00") != std::string::npos);
  o = run("eval --binary " + (dir / "d.qbm").string() + common);
  CHECK(o.code == 0);
  CHECK(o.output.find(expect) != std::string::npos);

  o = run("export-table --dataset cifar10" + common);
  CHECK(o.code == 0);
}
