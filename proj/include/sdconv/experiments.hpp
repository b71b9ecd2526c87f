#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdconv/datasets.hpp"
#include "sdconv/layers.hpp"
#include "sdconv/train.hpp"

namespace sdconv {

// ---- one-shot magnitude pruning --------------------------------------------------

/**
 * @brief Masks, per dynamic layer, the `fraction` smallest-magnitude weights
 *        across the concatenated k expert kernels (ties broken by position,
 *        earlier entries pruned first). The masks are installed as fixed
 *        binary masks, so the layer's learned threshold no longer applies;
 *        static-mode layers are untouched. The number of pruned entries is
 *        round(fraction * k * weights_per_expert), making the per-layer
 *        density exactly 1 - fraction up to that rounding.
 *
 * fraction outside [0, 1) -> ContractError. fraction == 0 leaves the model
 * untouched (no fixed masks are installed).
 */
void prune_pretrained(Model& model, float fraction);

// ---- aggregated-kernel statistics -------------------------------------------------

/// Streaming moments of one layer's per-sample aggregated kernel entries.
struct LayerKernelStats {
  std::string layer;
  double mean = 0.0;
  double variance = 0.0;  // population variance over samples x kernel entries
  int64_t count = 0;      // accumulated entries: samples * kernel size
};

struct KernelStats {
  std::vector<LayerKernelStats> layers;

  std::string to_csv() const;  // header layer,mean,variance,count

  /// Copy with each curve (means across layers, variances across layers)
  /// min-max scaled to [0, 1] for plotting; a constant curve maps to 0.
  /// The raw statistics are what the tool stores and serializes.
  KernelStats scaled_for_plot() const;
};

/**
 * @brief For every sample, forms each dynamic layer's aggregated kernel
 *        (attention-weighted sum of the masked experts at inference
 *        temperature 1) and streams mean and variance over all kernel
 *        entries of all samples with Welford updates, so the result is
 *        order-independent within 1e-6.
 *
 * Requires at least one dynamic layer (ContractError), batch_size >= 1,
 * and at least one sample after applying `limit` (0 = whole set).
 */
KernelStats kernel_statistics(Model& model, const Dataset& data, int batch_size,
                              int64_t limit = 0);

// ---- input-noise robustness --------------------------------------------------------

struct RobustnessConfig {
  /// Noise standard deviations, in normalized-pixel units (noise is added
  /// after dataset normalization).
  std::vector<float> sigmas = {0.05f, 0.10f, 0.15f, 0.20f};
  uint64_t seed = 1;  // noise stream root; each sigma draws from its own stream
  int batch_size = 128;
  int64_t limit = 0;  // evaluate only the first N samples (0 = all)
};

struct RobustnessPoint {
  float sigma = 0.0f;
  double accuracy = 0.0;
};

struct RobustnessReport {
  std::vector<RobustnessPoint> points;
  std::string to_csv() const;  // header sigma,accuracy
};

/**
 * @brief Top-1 accuracy under i.i.d. Gaussian input noise, one entry per
 *        sigma. The noise stream is derived from (seed, sigma bits), so a
 *        given sigma sees identical noise regardless of its list position,
 *        and sigma == 0 reproduces the clean evaluation bit-identically
 *        (the zero-noise path draws nothing from the stream).
 *
 * Empty sigma list or a negative sigma -> ContractError.
 */
RobustnessReport noise_robustness(Model& model, const Dataset& data,
                                  const RobustnessConfig& cfg);

// ---- sparsity-ratio sweep -----------------------------------------------------------

struct SweepPoint {
  float s = 0.0f;
  double final_density = 1.0;
  double accuracy = 0.0;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  std::string csv_path;  // empty when the base config had no out_dir

  std::string to_csv() const;  // header s,final_density,accuracy
};

/**
 * @brief Trains one model per target sparsity with otherwise identical
 *        configs (same seed, so the s = 0 entry is exactly the dense dynamic
 *        run). When the base config names an out_dir, each run writes under
 *        `<out_dir>/s<value>` and the curve lands in `<out_dir>/sweep.csv`.
 *
 * Any s outside [0, 1) -> ContractError.
 */
SweepReport sparsity_sweep(const TrainConfig& base, const std::vector<float>& s_list);

// ---- masking-strategy comparison -----------------------------------------------------

struct StrategyLayerRow {
  std::string layer;
  double layer_sparsity = 0.0;
  double kernel_sparsity = 0.0;
};

/// One trained run's report: accuracy, mask sparsities, and per-sample MAC
/// counts (dense vs aggregated-kernel-sparse).
struct StrategyResult {
  std::string mode;
  double accuracy = 0.0;
  double global_density = 1.0;
  std::vector<StrategyLayerRow> layers;
  long long macs_dense = 0;
  long long macs_sparse = 0;
};

struct MaskingComparison {
  StrategyResult different;  // per-expert masks
  StrategyResult same;       // one shared mask per layer

  std::string to_text() const;  // key=value lines, mode-prefixed
  std::string to_csv() const;   // header mode,accuracy,global_density,macs_dense,macs_sparse
};

/**
 * @brief Trains the base config twice from the same seed — once with
 *        per-expert masks, once with a shared mask per layer — and reports
 *        accuracy, layer/kernel sparsity, and MAC counts side by side.
 *        With a shared mask, kernel sparsity equals layer sparsity exactly;
 *        with per-expert masks it can only be lower, so at equal layer
 *        sparsity the shared mask yields at most as many sparse MACs.
 *
 * When the base config names an out_dir, the runs write under
 * `<out_dir>/different` and `<out_dir>/same`.
 */
MaskingComparison masking_strategy_compare(const TrainConfig& base);

}  // namespace sdconv
