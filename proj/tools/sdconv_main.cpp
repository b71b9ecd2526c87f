// Command-line front end: binds configuration files and key=value overrides
// to the training harness, the cost/sparsity analyzers, and the experiment
// drivers. Every run prints an effective-config block that reproduces it.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sdconv/analyzer.hpp"
#include "sdconv/checkpoint.hpp"
#include "sdconv/config.hpp"
#include "sdconv/datasets.hpp"
#include "sdconv/error.hpp"
#include "sdconv/experiments.hpp"
#include "sdconv/train.hpp"
#include "sdconv/zoo.hpp"

namespace {

using namespace sdconv;
namespace fs = std::filesystem;

std::string fmt9(double v) {
  std::ostringstream out;
  out << std::setprecision(9) << v;
  return out.str();
}

/// data_dir falls back to $SDCONV_DATA_DIR when nothing else set it.
void apply_data_dir_fallback(TrainConfig& cfg) {
  if (!cfg.data_dir.empty()) return;
  if (const char* env = std::getenv("SDCONV_DATA_DIR")) cfg.data_dir = env;
}

void require_data_dir(const TrainConfig& cfg) {
  if (cfg.data_dir.empty()) {
    throw ConfigError(
        "key 'data_dir': required (set it in the config, an override, or SDCONV_DATA_DIR)");
  }
}

/// Full resolution for config-driven commands: defaults -> file -> overrides,
/// then the environment fallback and optional synthetic-data generation.
TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides,
                           bool synthesize) {
  TrainConfig cfg = parse_train_config(path, overrides);
  apply_data_dir_fallback(cfg);
  if (synthesize) {
    require_data_dir(cfg);
    ensure_dataset(cfg.dataset, cfg.data_dir, cfg.seed);
  }
  return cfg;
}

/// Checkpoint-driven commands start from the run's own config snapshot, then
/// apply overrides on top.
struct LoadedRun {
  CheckpointData data;
  TrainConfig cfg;
  Model model;
};

LoadedRun load_run(const std::string& checkpoint_path,
                   const std::vector<std::string>& overrides, bool synthesize) {
  CheckpointData data = load_checkpoint(checkpoint_path);
  TrainConfig cfg = config_from_text(data.config_text);
  for (const std::string& line : overrides) apply_override(cfg, line);
  validate(cfg);
  apply_data_dir_fallback(cfg);
  if (synthesize) {
    require_data_dir(cfg);
    ensure_dataset(cfg.dataset, cfg.data_dir, cfg.seed);
  }
  Model model = build_model_for(cfg);
  restore_model(model, data);
  return LoadedRun{std::move(data), std::move(cfg), std::move(model)};
}

void echo_config(const TrainConfig& cfg) {
  std::cout << "# effective-config\n" << to_text(cfg) << "# end-config\n";
}

Dataset load_test_split(const TrainConfig& cfg) {
  require_data_dir(cfg);
  return load_dataset(cfg.dataset, cfg.data_dir, Split::kTest);
}

std::vector<float> parse_float_list(const std::string& text, const std::string& flag) {
  std::vector<float> out;
  std::stringstream in(text);
  std::string token;
  while (std::getline(in, token, ',')) {
    if (token.empty()) continue;
    try {
      size_t used = 0;
      float v = std::stof(token, &used);
      if (used != token.size()) throw std::invalid_argument(token);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("key '" + flag + "': not a number: '" + token + "'");
    }
  }
  if (out.empty()) throw ConfigError("key '" + flag + "': needs at least one value");
  return out;
}

// ---- subcommand bodies ---------------------------------------------------------

int run_train(const std::string& config_path, const std::vector<std::string>& overrides,
              bool synthesize) {
  TrainConfig cfg = resolve_config(config_path, overrides, synthesize);
  echo_config(cfg);
  TrainOutput out = train(cfg);
  std::cout << metrics_csv_header() << "\n";
  for (const EpochLog& row : out.result.epochs) std::cout << to_csv_row(row) << "\n";
  std::cout << "final_accuracy=" << fmt9(out.result.final_accuracy) << "\n";
  std::cout << "final_density=" << fmt9(out.result.final_density) << "\n";
  std::cout << "total_steps=" << out.result.total_steps << "\n";
  std::cout << "checkpoint="
            << (out.result.checkpoint_path.empty() ? "(none)" : out.result.checkpoint_path)
            << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint_path, const std::vector<std::string>& overrides,
             bool synthesize) {
  LoadedRun run = load_run(checkpoint_path, overrides, synthesize);
  echo_config(run.cfg);
  Dataset test = load_test_split(run.cfg);
  double acc = evaluate(run.model, test, run.cfg.batch_size, run.cfg.eval_limit);
  std::cout << "checkpoint=" << checkpoint_path << "\n";
  std::cout << "accuracy=" << fmt9(acc) << "\n";
  return 0;
}

int run_analyze_cost(const std::string& model_id, int resolution, int experts, int reduce,
                     int classes, bool as_csv) {
  ZooOptions options;
  options.num_experts = experts;
  options.reduce_ratio = reduce;
  options.num_classes = classes;
  CostReport report = count_cost(build_cost_model(model_id, resolution, options));
  std::cout << "# effective-config\nmodel=" << model_id << "\nresolution=" << resolution
            << "\nexperts=" << experts << "\nreduce=" << reduce << "\nclasses=" << classes
            << "\n# end-config\n";
  std::cout << (as_csv ? report.to_csv() : report.to_text());
  return 0;
}

int run_analyze_sparsity(const std::string& checkpoint_path,
                         const std::vector<std::string>& overrides, bool as_csv) {
  LoadedRun run = load_run(checkpoint_path, overrides, false);
  echo_config(run.cfg);
  SparsityReport report = measure_sparsity(run.model);
  std::cout << (as_csv ? report.to_csv() : report.to_text());
  return 0;
}

int run_prune(const std::string& checkpoint_path, const std::vector<std::string>& overrides,
              bool synthesize, float fraction, const std::string& out_path) {
  LoadedRun run = load_run(checkpoint_path, overrides, synthesize);
  echo_config(run.cfg);
  Dataset test = load_test_split(run.cfg);

  double clean = evaluate(run.model, test, run.cfg.batch_size, run.cfg.eval_limit);
  KernelStats before =
      kernel_statistics(run.model, test, run.cfg.batch_size, run.cfg.eval_limit);

  prune_pretrained(run.model, fraction);

  double pruned = evaluate(run.model, test, run.cfg.batch_size, run.cfg.eval_limit);
  KernelStats after =
      kernel_statistics(run.model, test, run.cfg.batch_size, run.cfg.eval_limit);
  SparsityReport sparsity = measure_sparsity(run.model);

  std::cout << "fraction=" << fmt9(double(fraction)) << "\n";
  std::cout << "clean_accuracy=" << fmt9(clean) << "\n";
  std::cout << "pruned_accuracy=" << fmt9(pruned) << "\n";
  std::cout << "accuracy_drop=" << fmt9(clean - pruned) << "\n";
  std::cout << sparsity.to_text();
  std::cout << "# kernel-stats vanilla\n" << before.to_csv();
  std::cout << "# kernel-stats pruned\n" << after.to_csv();

  if (!out_path.empty()) {
    // Fixed masks are not checkpoint rows, so bake them into the expert
    // weights and write a dense-mode snapshot: the saved file reloads as a
    // model whose pruned weights are literal zeros and stay that way
    // (threshold masking would otherwise re-derive masks on load).
    for (SDConv2d* layer : run.model.sdconv_layers()) {
      if (!layer->has_fixed_masks()) continue;
      LayerMasks masks = layer->build_masks();
      for (Parameter* param : layer->parameters()) {
        if (param->local_name.rfind("expert", 0) != 0 ||
            param->local_name.find(".weight") == std::string::npos) {
          continue;
        }
        int i = std::stoi(param->local_name.substr(6));
        std::vector<float>& w = param->value.mutable_values();
        const std::vector<float>& m = masks.hard[size_t(i)].values();
        for (size_t p = 0; p < w.size(); ++p) w[p] *= m[p];
      }
    }
    TrainConfig baked_cfg = run.cfg;
    baked_cfg.mask_mode = "dynamic-dense";
    baked_cfg.target_sparsity = 0.0f;
    CheckpointData baked =
        build_checkpoint(run.model, nullptr, checkpoint_step(run.data),
                         checkpoint_schedule_density(run.data), to_text(baked_cfg));
    save_checkpoint(out_path, baked);
    std::cout << "baked_checkpoint=" << out_path << "\n";
  }
  return 0;
}

int run_robustness(const std::string& checkpoint_path,
                   const std::vector<std::string>& overrides, bool synthesize,
                   const std::string& sigmas_text, uint64_t noise_seed,
                   const std::string& out_path) {
  LoadedRun run = load_run(checkpoint_path, overrides, synthesize);
  echo_config(run.cfg);
  Dataset test = load_test_split(run.cfg);

  RobustnessConfig rc;
  if (!sigmas_text.empty()) rc.sigmas = parse_float_list(sigmas_text, "sigmas");
  rc.seed = noise_seed;
  rc.batch_size = run.cfg.batch_size;
  rc.limit = run.cfg.eval_limit;
  RobustnessReport report = noise_robustness(run.model, test, rc);
  std::cout << report.to_csv();
  if (!out_path.empty()) {
    std::ofstream file(out_path, std::ios::binary);
    if (!file) throw DataError("cannot open output file: " + out_path);
    file << report.to_csv();
    std::cout << "csv=" << out_path << "\n";
  }
  return 0;
}

int run_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              bool synthesize, const std::string& sparsities_text) {
  TrainConfig cfg = resolve_config(config_path, overrides, synthesize);
  echo_config(cfg);
  std::vector<float> targets = parse_float_list(sparsities_text, "sparsities");
  SweepReport report = sparsity_sweep(cfg, targets);
  std::cout << report.to_csv();
  if (!report.csv_path.empty()) std::cout << "csv=" << report.csv_path << "\n";
  return 0;
}

int run_compare(const std::string& config_path, const std::vector<std::string>& overrides,
                bool synthesize) {
  TrainConfig cfg = resolve_config(config_path, overrides, synthesize);
  echo_config(cfg);
  MaskingComparison cmp = masking_strategy_compare(cfg);
  std::cout << cmp.to_text();
  return 0;
}

int run_inspect(const std::string& checkpoint_path) {
  CheckpointData data = load_checkpoint(checkpoint_path);
  std::cout << "checkpoint=" << checkpoint_path << "\n";
  std::cout << "version=" << data.version << "\n";
  std::cout << "tensors=" << data.tensors.size() << "\n";
  std::cout << "step=" << checkpoint_step(data) << "\n";
  std::cout << "schedule_density=" << fmt9(double(checkpoint_schedule_density(data))) << "\n";
  for (const auto& [name, tensor] : data.tensors) {
    std::cout << "tensor " << name << " shape=" << shape_to_string(tensor.shape())
              << " numel=" << tensor.size() << "\n";
  }
  std::cout << "# config snapshot\n" << data.config_text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Sparse dynamic convolution toolkit: trains attention-mixed expert kernels with "
      "learnable-threshold pruning, and analyzes the resulting cost and sparsity."};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  const std::string override_help = "key=value settings applied after the config file";
  const std::string snapshot_override_help =
      "key=value settings applied on top of the checkpoint's config snapshot";
  const std::string synth_help = "generate the dataset files under data_dir if missing";

  // train
  std::string train_config;
  std::vector<std::string> train_overrides;
  bool train_synth = false;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and log per-epoch metrics");
  train_cmd->add_option("--config", train_config, "config file (key=value lines or JSON)");
  train_cmd->add_option("overrides", train_overrides, override_help);
  train_cmd->add_flag("--synthesize-data", train_synth, synth_help);

  // eval
  std::string eval_ck;
  std::vector<std::string> eval_overrides;
  bool eval_synth = false;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint on the test split of its dataset");
  eval_cmd->add_option("--checkpoint", eval_ck, "checkpoint file")->required();
  eval_cmd->add_option("overrides", eval_overrides, snapshot_override_help);
  eval_cmd->add_flag("--synthesize-data", eval_synth, synth_help);

  // analyze-cost
  std::string cost_model = "resnet18";
  int cost_resolution = 224, cost_experts = 4, cost_reduce = 16, cost_classes = 1000;
  bool cost_csv = false;
  CLI::App* cost_cmd = app.add_subcommand(
      "analyze-cost", "Parameter and MAC accounting for a zoo architecture");
  cost_cmd->add_option("--model", cost_model, "architecture id (prefix dy- for dynamic)");
  cost_cmd->add_option("--resolution", cost_resolution, "input resolution (pixels)");
  cost_cmd->add_option("--experts", cost_experts, "experts per dynamic layer");
  cost_cmd->add_option("--reduce", cost_reduce, "attention reduction ratio");
  cost_cmd->add_option("--classes", cost_classes, "classifier classes");
  cost_cmd->add_flag("--csv", cost_csv, "per-layer CSV instead of the text summary");

  // analyze-sparsity
  std::string sparsity_ck;
  std::vector<std::string> sparsity_overrides;
  bool sparsity_csv = false;
  CLI::App* sparsity_cmd = app.add_subcommand(
      "analyze-sparsity", "Mask sparsity of a checkpoint, per layer and global");
  sparsity_cmd->add_option("--checkpoint", sparsity_ck, "checkpoint file")->required();
  sparsity_cmd->add_option("overrides", sparsity_overrides, snapshot_override_help);
  sparsity_cmd->add_flag("--csv", sparsity_csv, "per-layer CSV instead of key=value text");

  // prune-pretrained
  std::string prune_ck, prune_out;
  std::vector<std::string> prune_overrides;
  bool prune_synth = false;
  float prune_fraction = 0.5f;
  CLI::App* prune_cmd = app.add_subcommand(
      "prune-pretrained",
      "One-shot magnitude pruning of a trained checkpoint, with before/after report");
  prune_cmd->add_option("--checkpoint", prune_ck, "checkpoint file")->required();
  prune_cmd->add_option("--fraction", prune_fraction, "fraction of weights to prune [0,1)");
  prune_cmd->add_option(
      "--out", prune_out,
      "write a dense-mode checkpoint with the masks multiplied into the weights");
  prune_cmd->add_option("overrides", prune_overrides, snapshot_override_help);
  prune_cmd->add_flag("--synthesize-data", prune_synth, synth_help);

  // robustness
  std::string robust_ck, robust_sigmas, robust_out;
  std::vector<std::string> robust_overrides;
  bool robust_synth = false;
  uint64_t robust_seed = 1;
  CLI::App* robust_cmd = app.add_subcommand(
      "robustness", "Accuracy under Gaussian input noise, one row per sigma");
  robust_cmd->add_option("--checkpoint", robust_ck, "checkpoint file")->required();
  robust_cmd->add_option("--sigmas", robust_sigmas,
                         "comma-separated noise levels (default 0.05,0.1,0.15,0.2)");
  robust_cmd->add_option("--noise-seed", robust_seed, "noise stream seed");
  robust_cmd->add_option("--out", robust_out, "also write the CSV here");
  robust_cmd->add_option("overrides", robust_overrides, snapshot_override_help);
  robust_cmd->add_flag("--synthesize-data", robust_synth, synth_help);

  // sweep
  std::string sweep_config, sweep_sparsities = "0.2,0.4,0.6,0.8";
  std::vector<std::string> sweep_overrides;
  bool sweep_synth = false;
  CLI::App* sweep_cmd = app.add_subcommand(
      "sweep", "Train one model per target sparsity and emit the accuracy curve");
  sweep_cmd->add_option("--config", sweep_config, "config file (key=value lines or JSON)");
  sweep_cmd->add_option("--sparsities", sweep_sparsities, "comma-separated targets in [0,1)");
  sweep_cmd->add_option("overrides", sweep_overrides, override_help);
  sweep_cmd->add_flag("--synthesize-data", sweep_synth, synth_help);

  // compare-masks
  std::string compare_config;
  std::vector<std::string> compare_overrides;
  bool compare_synth = false;
  CLI::App* compare_cmd = app.add_subcommand(
      "compare-masks", "Train per-expert vs shared masks and report them side by side");
  compare_cmd->add_option("--config", compare_config, "config file (key=value lines or JSON)");
  compare_cmd->add_option("overrides", compare_overrides, override_help);
  compare_cmd->add_flag("--synthesize-data", compare_synth, synth_help);

  // inspect-checkpoint
  std::string inspect_ck;
  CLI::App* inspect_cmd =
      app.add_subcommand("inspect-checkpoint", "List a checkpoint's tensors and snapshot");
  inspect_cmd->add_option("--checkpoint", inspect_ck, "checkpoint file")->required();

  int status = 0;
  train_cmd->callback([&] { status = run_train(train_config, train_overrides, train_synth); });
  eval_cmd->callback([&] { status = run_eval(eval_ck, eval_overrides, eval_synth); });
  cost_cmd->callback([&] {
    status = run_analyze_cost(cost_model, cost_resolution, cost_experts, cost_reduce,
                              cost_classes, cost_csv);
  });
  sparsity_cmd->callback(
      [&] { status = run_analyze_sparsity(sparsity_ck, sparsity_overrides, sparsity_csv); });
  prune_cmd->callback([&] {
    status = run_prune(prune_ck, prune_overrides, prune_synth, prune_fraction, prune_out);
  });
  robust_cmd->callback([&] {
    status = run_robustness(robust_ck, robust_overrides, robust_synth, robust_sigmas,
                            robust_seed, robust_out);
  });
  sweep_cmd->callback(
      [&] { status = run_sweep(sweep_config, sweep_overrides, sweep_synth, sweep_sparsities); });
  compare_cmd->callback(
      [&] { status = run_compare(compare_config, compare_overrides, compare_synth); });
  inspect_cmd->callback([&] { status = run_inspect(inspect_ck); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << std::endl;
    return 1;
  }
  return status;
}
