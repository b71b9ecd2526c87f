#include "sdconv/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sdconv/analyzer.hpp"
#include "sdconv/checkpoint.hpp"
#include "sdconv/config.hpp"
#include "sdconv/error.hpp"
#include "sdconv/optimizer.hpp"
#include "sdconv/sparsity.hpp"
#include "sdconv/zoo.hpp"

namespace sdconv {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(9);
  out << v;
  return out.str();
}

/// Per-layer parameter statistics printed when the loss goes non-finite.
void dump_diagnostics(Model& model, long long step, const LossBreakdown& loss) {
  std::fprintf(stderr, "diagnostic dump at step %lld: task=%g sparsity=%g decay=%g\n", step,
               double(loss.task), double(loss.sparsity), double(loss.decay));
  for (const NamedParameter& np : model.parameters()) {
    const std::vector<float>& v = np.param->value.values();
    double lo = 1e300, hi = -1e300, sum = 0.0;
    size_t non_finite = 0;
    for (float x : v) {
      if (!std::isfinite(x)) {
        ++non_finite;
        continue;
      }
      lo = std::min(lo, double(x));
      hi = std::max(hi, double(x));
      sum += double(x);
    }
    std::fprintf(stderr, "  %-24s numel=%zu min=%g max=%g mean=%g non_finite=%zu\n",
                 np.name.c_str(), v.size(), lo, hi, v.empty() ? 0.0 : sum / double(v.size()),
                 non_finite);
  }
}

}  // namespace

std::string metrics_csv_header() {
  return "epoch,step,train_loss,task_loss,sparsity_loss,eval_acc,global_density,lr";
}

std::string to_csv_row(const EpochLog& r) {
  std::ostringstream out;
  out << r.epoch << "," << r.step << "," << fmt(r.train_loss) << "," << fmt(r.task_loss) << ","
      << fmt(r.sparsity_loss) << "," << fmt(r.eval_acc) << "," << fmt(r.global_density) << ","
      << fmt(r.lr);
  return out.str();
}

Model build_model_for(const TrainConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  ToyModelConfig tm;
  tm.in_channels = cfg.dataset == "cifar10" ? 3 : 1;
  tm.num_experts = cfg.num_experts;
  tm.reduce_ratio = cfg.reduce_ratio;
  tm.sharpness = cfg.sharpness;
  tm.mode = mask_mode_from_string(cfg.mask_mode);
  // Zero target sparsity means no pruning: run the dense-aggregation path so
  // the masked modes degenerate to dense dynamic training exactly (the
  // constant-ones mask is bit-identical and adds no gradient chain).
  if (cfg.target_sparsity == 0.0f && tm.mode != MaskMode::kStatic)
    tm.mode = MaskMode::kDynamicDense;
  return build_toy_model(tm, rng);
}

double evaluate(Model& model, const Dataset& data, int batch_size, int64_t limit) {
  if (batch_size < 1) throw ContractError("evaluate batch size must be >= 1");
  int64_t n = limit > 0 ? std::min(limit, data.count) : data.count;
  if (n < 1) throw ContractError("evaluate needs at least one sample");

  NoGradGuard guard;
  int64_t correct = 0;
  std::vector<int64_t> indices;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t count = std::min<int64_t>(batch_size, n - start);
    indices.clear();
    for (int64_t i = 0; i < count; ++i) indices.push_back(start + i);
    Tensor x = data.gather(indices);
    ForwardCtx ctx;
    Tensor logits = model.forward(x, ctx);
    const Shape& shape = logits.shape();
    int classes = shape[1];
    for (int64_t row = 0; row < count; ++row) {
      const float* p = logits.values().data() + size_t(row) * size_t(classes);
      int best = 0;
      for (int c = 1; c < classes; ++c)
        if (p[c] > p[best]) best = c;  // strict: ties keep the lowest index
      if (best == data.labels[size_t(start + row)]) ++correct;
    }
  }
  return double(correct) / double(n);
}

TrainOutput train(const TrainConfig& cfg) {
  validate(cfg);
  if (cfg.data_dir.empty()) throw ConfigError("key 'data_dir': required for training");

  Dataset train_ds = load_dataset(cfg.dataset, cfg.data_dir, Split::kTrain);
  Dataset test_ds = load_dataset(cfg.dataset, cfg.data_dir, Split::kTest);
  int64_t train_n =
      cfg.train_limit > 0 ? std::min<int64_t>(cfg.train_limit, train_ds.count) : train_ds.count;

  long long steps_per_epoch = train_n / cfg.batch_size;  // drop-last batching
  if (steps_per_epoch < 1)
    throw ConfigError("key 'batch_size': exceeds the available training samples (" +
                      std::to_string(train_n) + ")");
  long long total_steps = steps_per_epoch * cfg.epochs;
  long long warmup_steps = llround(double(cfg.warmup_epochs) * double(steps_per_epoch));
  long long anneal_steps = llround(double(cfg.attn_anneal_epochs) * double(steps_per_epoch));

  Model model = build_model_for(cfg);
  Rng rng(cfg.seed);
  SparsitySchedule schedule =
      SparsitySchedule::make(cfg.target_sparsity, cfg.prune_iterations, total_steps);

  OptimizerConfig ocfg;
  ocfg.momentum = cfg.momentum;
  ocfg.freeze_thresholds = cfg.target_sparsity == 0.0f;
  SgdOptimizer opt(model.parameters(), ocfg);

  std::string config_text = to_text(cfg);
  long long start_step = 0;
  if (!cfg.resume_path.empty()) {
    CheckpointData ck = load_checkpoint(cfg.resume_path);
    restore_model(model, ck);
    restore_optimizer(opt, ck);
    start_step = checkpoint_step(ck);
    if (start_step % steps_per_epoch != 0)
      throw ContractError("resume step " + std::to_string(start_step) +
                          " is not an epoch boundary (steps per epoch: " +
                          std::to_string(steps_per_epoch) + ")");
    if (start_step >= total_steps)
      throw ContractError("resume step " + std::to_string(start_step) +
                          " is already at or past total steps " + std::to_string(total_steps));
    // replay the schedule so the density target continues without discontinuity
    for (long long t = 1; t <= start_step; ++t) schedule.advance(t);
  }

  TrainResult result;
  result.total_steps = total_steps;

  std::ofstream metrics, layer_log;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    result.metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    result.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
    bool fresh = cfg.resume_path.empty() || !fs::exists(result.metrics_path);
    metrics.open(result.metrics_path, fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw DataError("cannot open metrics file: " + result.metrics_path);
    if (fresh) metrics << metrics_csv_header() << "\n";
    std::string layer_path = (fs::path(cfg.out_dir) / "sparsity.csv").string();
    bool layer_fresh = cfg.resume_path.empty() || !fs::exists(layer_path);
    layer_log.open(layer_path, layer_fresh ? std::ios::trunc : std::ios::app);
    if (layer_fresh) layer_log << "epoch,layer,layer_sparsity,kernel_sparsity\n";
  }

  bool augment = cfg.dataset == "cifar10";
  int last_epoch = cfg.stop_after_epochs > 0 ? cfg.stop_after_epochs : cfg.epochs;
  long long global_step = start_step;
  for (int epoch = int(start_step / steps_per_epoch); epoch < last_epoch; ++epoch) {
    std::vector<int64_t> order(size_t(train_n), 0);
    std::iota(order.begin(), order.end(), 0);
    RngStream shuffle_stream = rng.stream("shuffle", uint64_t(epoch));
    shuffle_stream.shuffle(order);
    RngStream augment_stream = rng.stream("augment", uint64_t(epoch));

    double sum_total = 0.0, sum_task = 0.0, sum_sparsity = 0.0;
    double last_lr = 0.0;
    std::vector<int64_t> batch_idx;
    std::vector<int> labels;
    for (long long s = 0; s < steps_per_epoch; ++s) {
      ++global_step;
      float density_target = schedule.advance(global_step);
      long long step0 = global_step - 1;
      float lr = cosine_warmup_lr(step0, cfg.max_lr, warmup_steps, total_steps);
      float temp = cfg.attn_temp_end;
      if (anneal_steps > 0 && step0 < anneal_steps) {
        double a = double(step0) / double(anneal_steps);
        temp = float(double(cfg.attn_temp_start) +
                     (double(cfg.attn_temp_end) - double(cfg.attn_temp_start)) * a);
      }

      batch_idx.assign(order.begin() + s * cfg.batch_size,
                       order.begin() + (s + 1) * cfg.batch_size);
      Tensor x = train_ds.gather(batch_idx);
      if (augment) x = augment_flip_pad_crop(x, augment_stream);
      labels.clear();
      for (int64_t idx : batch_idx) labels.push_back(train_ds.labels[size_t(idx)]);

      ForwardCtx ctx;
      ctx.training = true;
      ctx.attn_temperature = temp;
      Tensor logits = model.forward(x, ctx);
      LossBreakdown loss = total_loss(logits, labels, ctx.masks, density_target, cfg.lambda_s,
                                      cfg.lambda_r, opt.params());
      float total_value = loss.total.values()[0];
      if (!std::isfinite(total_value)) {
        dump_diagnostics(model, global_step, loss);
        throw NumericError("non-finite training loss at step " + std::to_string(global_step) +
                           " (diagnostic dump on stderr)");
      }

      opt.zero_grad();
      backward(loss.total);
      opt.step(lr);

      sum_total += double(total_value);
      sum_task += double(loss.task);
      sum_sparsity += double(loss.sparsity);
      last_lr = double(lr);
    }

    EpochLog row;
    row.epoch = epoch + 1;
    row.step = global_step;
    row.train_loss = sum_total / double(steps_per_epoch);
    row.task_loss = sum_task / double(steps_per_epoch);
    row.sparsity_loss = sum_sparsity / double(steps_per_epoch);
    row.eval_acc = evaluate(model, test_ds, cfg.batch_size, cfg.eval_limit);
    SparsityReport report = measure_sparsity(model);
    row.global_density = report.global_density;
    row.lr = last_lr;
    result.epochs.push_back(row);

    if (metrics.is_open()) {
      metrics << to_csv_row(row) << "\n";
      metrics.flush();
      for (const LayerSparsity& ls : report.layers)
        layer_log << row.epoch << "," << ls.layer << "," << fmt(ls.layer_sparsity) << ","
                  << fmt(ls.kernel_sparsity) << "\n";
      layer_log.flush();
    }
    if (!result.checkpoint_path.empty()) {
      CheckpointData ck = build_checkpoint(model, &opt, global_step, schedule.current_density,
                                            config_text);
      save_checkpoint(result.checkpoint_path, ck);
    }
  }

  if (!result.epochs.empty()) {
    result.final_accuracy = result.epochs.back().eval_acc;
    result.final_density = result.epochs.back().global_density;
  }
  return {std::move(result), std::move(model)};
}

}  // namespace sdconv
