#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "sdconv/config.hpp"
#include "sdconv/datasets.hpp"
#include "sdconv/error.hpp"

using namespace sdconv;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int status = -1;
  std::string output;  // stdout and stderr interleaved
};

/// Runs the installed CLI binary through the shell, capturing both streams.
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  std::string cmd = env_prefix + std::string(SDCONV_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE_MESSAGE(pipe != nullptr, "popen failed for: ", cmd);
  RunResult result;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) result.output += buf;
  int rc = ::pclose(pipe);
  result.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return result;
}

/// First value after `key=` on its own line, or empty.
std::string value_of(const std::string& text, const std::string& key) {
  std::string needle = key + "=";
  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    if (text.compare(pos, needle.size(), needle) == 0) {
      return text.substr(pos + needle.size(), eol - pos - needle.size());
    }
    pos = eol + 1;
  }
  return "";
}

/// Scratch area with a small synthetic MNIST copy and one CLI-trained run.
struct Scratch {
  fs::path root;
  std::string data;
  std::string run_dir;
  std::string checkpoint;
  RunResult train_run;

  Scratch() {
    root = fs::temp_directory_path() / ("sdconv_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    data = (root / "data").string();
    write_synthetic_mnist(data, 9, 512, 256);
    run_dir = (root / "run").string();
    train_run = run_cli("train data_dir=" + data + " out_dir=" + run_dir +
                        " epochs=2 train_limit=512 eval_limit=256 batch_size=128" +
                        " max_lr=0.1 lambda_s=0.5 seed=33");
    checkpoint = run_dir + "/checkpoint.bin";
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }
};

Scratch& scratch() {
  static Scratch s;
  return s;
}

}  // namespace

TEST_CASE("training echoes a reproducible effective config and its metrics") {
  const RunResult& run = scratch().train_run;
  REQUIRE_MESSAGE(run.status == 0, run.output);

  // The echo block round-trips through the config parser unchanged.
  size_t begin = run.output.find("# effective-config\n");
  size_t end = run.output.find("# end-config\n");
  REQUIRE(begin != std::string::npos);
  REQUIRE(end != std::string::npos);
  std::string block = run.output.substr(begin + 19, end - begin - 19);
  TrainConfig cfg = config_from_text(block);
  validate(cfg);
  CHECK(to_text(cfg) == block);
  CHECK(value_of(block, "seed") == "33");
  CHECK(value_of(block, "dataset") == "mnist");
  CHECK(value_of(block, "lambda_s") == "0.5");             // override visible in the echo
  CHECK(std::stof(value_of(block, "momentum")) == 0.9f);   // default visible in the echo

  CHECK(run.output.find(metrics_csv_header()) != std::string::npos);
  CHECK_FALSE(value_of(run.output, "final_accuracy").empty());
  CHECK(value_of(run.output, "checkpoint") == scratch().checkpoint);
  CHECK(fs::exists(scratch().checkpoint));
}

TEST_CASE("eval prints exactly the accuracy train last logged") {
  RunResult eval = run_cli("eval --checkpoint " + scratch().checkpoint);
  REQUIRE_MESSAGE(eval.status == 0, eval.output);
  std::string trained = value_of(scratch().train_run.output, "final_accuracy");
  std::string evaluated = value_of(eval.output, "accuracy");
  REQUIRE_FALSE(trained.empty());
  CHECK(evaluated == trained);
}

TEST_CASE("cost analysis reports the known resnet18 budget") {
  RunResult run = run_cli("analyze-cost --model resnet18 --resolution 224");
  REQUIRE_MESSAGE(run.status == 0, run.output);
  double backbone = std::stod(value_of(run.output, "params_backbone"));
  CHECK(std::fabs(backbone - 11.1e6) / 11.1e6 <= 0.02);
  CHECK_FALSE(value_of(run.output, "macs_dense").empty());

  RunResult csv = run_cli("analyze-cost --model dy-resnet18 --resolution 224 --csv");
  REQUIRE(csv.status == 0);
  CHECK(csv.output.find("layer,params,macs_dense,macs_sparse") != std::string::npos);
}

TEST_CASE("unknown or missing subcommands fail with usage text") {
  RunResult unknown = run_cli("frobnicate");
  CHECK(unknown.status != 0);
  CHECK(unknown.output.find("Usage:") != std::string::npos);

  RunResult bare = run_cli("");
  CHECK(bare.status != 0);
  CHECK(bare.output.find("Usage:") != std::string::npos);
}

TEST_CASE("failures come out as one structured error line") {
  RunResult bad_key = run_cli("train bogus=1");
  CHECK(bad_key.status == 1);
  CHECK(bad_key.output.find("error: config: unknown key 'bogus'") != std::string::npos);

  RunResult bad_range = run_cli("train data_dir=" + scratch().data + " s=1.0");
  CHECK(bad_range.status == 1);
  CHECK(bad_range.output.find("error: config: key 's'") != std::string::npos);

  RunResult no_data = run_cli("train epochs=2");
  CHECK(no_data.status == 1);
  CHECK(no_data.output.find("error: config: key 'data_dir'") != std::string::npos);

  RunResult no_ck = run_cli("eval --checkpoint " + scratch().data + "/missing.bin");
  CHECK(no_ck.status == 1);
  CHECK(no_ck.output.find("error: data:") != std::string::npos);

  RunResult bad_sigma =
      run_cli("robustness --checkpoint " + scratch().checkpoint + " --sigmas 0.1,abc");
  CHECK(bad_sigma.status == 1);
  CHECK(bad_sigma.output.find("error: config: key 'sigmas': not a number: 'abc'") !=
        std::string::npos);
}

TEST_CASE("the data directory falls back to SDCONV_DATA_DIR") {
  RunResult run = run_cli("train epochs=2 train_limit=256 eval_limit=128 batch_size=64",
                          "SDCONV_DATA_DIR=" + scratch().data + " ");
  REQUIRE_MESSAGE(run.status == 0, run.output);
  CHECK(value_of(run.output, "data_dir") == scratch().data);
}

TEST_CASE("checkpoint inspection and sparsity analysis read a trained run") {
  RunResult inspect = run_cli("inspect-checkpoint --checkpoint " + scratch().checkpoint);
  REQUIRE_MESSAGE(inspect.status == 0, inspect.output);
  CHECK_FALSE(value_of(inspect.output, "tensors").empty());
  CHECK(value_of(inspect.output, "step") == "8");
  CHECK(inspect.output.find("# config snapshot") != std::string::npos);

  RunResult sparsity = run_cli("analyze-sparsity --checkpoint " + scratch().checkpoint);
  REQUIRE(sparsity.status == 0);
  CHECK_FALSE(value_of(sparsity.output, "global_density").empty());

  RunResult csv = run_cli("analyze-sparsity --csv --checkpoint " + scratch().checkpoint);
  REQUIRE(csv.status == 0);
  CHECK(csv.output.find("layer,layer_sparsity,kernel_sparsity") != std::string::npos);
}

TEST_CASE("robustness uses the default sigma grid and honors overrides") {
  RunResult run =
      run_cli("robustness --checkpoint " + scratch().checkpoint + " eval_limit=64");
  REQUIRE_MESSAGE(run.status == 0, run.output);
  size_t header = run.output.find("sigma,accuracy\n");
  REQUIRE(header != std::string::npos);
  std::string rows = run.output.substr(header);
  CHECK(rows.find("\n0.05,") != std::string::npos);
  CHECK(rows.find("\n0.2,") != std::string::npos);
  CHECK(value_of(run.output, "eval_limit") == "64");  // override echoed
}

TEST_CASE("pruning a trained checkpoint reports both models and can bake the result") {
  std::string baked = (fs::path(scratch().run_dir) / "pruned.bin").string();
  RunResult run = run_cli("prune-pretrained --checkpoint " + scratch().checkpoint +
                          " --fraction 0.5 --out " + baked);
  REQUIRE_MESSAGE(run.status == 0, run.output);
  CHECK_FALSE(value_of(run.output, "clean_accuracy").empty());
  CHECK_FALSE(value_of(run.output, "pruned_accuracy").empty());
  CHECK(value_of(run.output, "sd1.layer_sparsity") == "0.5");
  CHECK(run.output.find("# kernel-stats vanilla") != std::string::npos);
  CHECK(run.output.find("# kernel-stats pruned") != std::string::npos);
  REQUIRE(fs::exists(baked));

  // The baked checkpoint evaluates to the pruned accuracy (zeros are real).
  RunResult eval = run_cli("eval --checkpoint " + baked);
  REQUIRE_MESSAGE(eval.status == 0, eval.output);
  CHECK(value_of(eval.output, "accuracy") == value_of(run.output, "pruned_accuracy"));
}
