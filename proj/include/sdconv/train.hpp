#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdconv/datasets.hpp"
#include "sdconv/layers.hpp"

namespace sdconv {

/**
 * @brief Full regimen for one training run. Defaults follow the dynamic-
 *        convolution training recipe: k = 4 experts, reduction 16, sharpness
 *        T = 1/1024, budget weight 0.01, weight decay 4e-5, momentum 0.9.
 */
struct TrainConfig {
  std::string dataset = "mnist";   // "mnist" | "cifar10"
  std::string data_dir;            // directory with the dataset files
  std::string model = "toy";       // the trainable architecture
  int num_experts = 4;             // k
  int reduce_ratio = 16;           // r
  float sharpness = 1.0f / 1024.0f;  // T
  float target_sparsity = 0.5f;    // s in [0,1)
  int prune_iterations = 4;        // n
  int epochs = 5;
  int batch_size = 128;
  float max_lr = 0.05f;
  float warmup_epochs = 1.0f;      // linear warmup, in (possibly fractional) epochs
  float lambda_s = 0.01f;          // budget-penalty weight
  float lambda_r = 4e-5f;          // weight-decay coefficient
  float momentum = 0.9f;
  uint64_t seed = 1;
  std::string mask_mode = "sparse-different-masks";
  // attention softmax temperature anneals linearly from start to end over the
  // first `attn_anneal_epochs` of training, then stays at end.
  float attn_temp_start = 30.0f;
  float attn_temp_end = 1.0f;
  float attn_anneal_epochs = 1.0f;
  int64_t train_limit = 0;         // use only the first N samples (0 = all)
  int64_t eval_limit = 0;          // evaluate on only the first N samples (0 = all)
  std::string out_dir;             // metrics.csv / sparsity.csv / checkpoint.bin (empty = no files)
  std::string resume_path;         // checkpoint to resume from (must be at an epoch boundary)
  // Halt after this many epochs while keeping the schedule and learning rate
  // laid out for the full `epochs` run (0 = train to the end). The checkpoint
  // written at the halt resumes the exact trajectory.
  int stop_after_epochs = 0;
};

/// One metrics row, written per epoch. Columns and order match the CSV
/// header exactly: epoch,step,train_loss,task_loss,sparsity_loss,eval_acc,
/// global_density,lr. Losses are epoch means; sparsity_loss is the raw L0
/// penalty before its λs weight; lr is the last step's learning rate.
struct EpochLog {
  int epoch = 0;
  long long step = 0;
  double train_loss = 0.0;
  double task_loss = 0.0;
  double sparsity_loss = 0.0;
  double eval_acc = 0.0;
  double global_density = 1.0;
  double lr = 0.0;
};

std::string metrics_csv_header();
std::string to_csv_row(const EpochLog& row);

struct TrainResult {
  std::vector<EpochLog> epochs;
  double final_accuracy = 0.0;
  double final_density = 1.0;
  long long total_steps = 0;
  std::string checkpoint_path;  // empty when out_dir was empty
  std::string metrics_path;
};

struct TrainOutput {
  TrainResult result;
  Model model;
};

/**
 * @brief Executes the iterative-pruning training loop: per step, forward with
 *        the annealed attention temperature, composite loss (task + λs·budget
 *        + λr·decay), backward, SGD update (plain clipped SGD for thresholds),
 *        advancing the density target at phase boundaries. Evaluation and
 *        metric logging happen at each epoch end. A non-finite loss aborts
 *        with a per-layer diagnostic dump (NumericError).
 */
TrainOutput train(const TrainConfig& cfg);

/// Top-1 accuracy over the first `limit` samples (0 = all); argmax ties pick
/// the lowest class index. Runs under NoGrad with hard masks.
double evaluate(Model& model, const Dataset& data, int batch_size, int64_t limit = 0);

/// Rebuild the architecture a TrainConfig describes (fresh weights from the
/// config seed) — the shape restore_model expects for its checkpoints.
Model build_model_for(const TrainConfig& cfg);

}  // namespace sdconv
