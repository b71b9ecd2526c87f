#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sdconv/layers.hpp"

namespace sdconv {

/// Linear warmup to max_lr over warmup_steps, then cosine decay to zero at
/// total_steps. `step` is 0-based.
float cosine_warmup_lr(long long step, float max_lr, long long warmup_steps,
                       long long total_steps);

struct OptimizerConfig {
  float momentum = 0.9f;
  /// Threshold learning rate = tau_lr_scale × current model learning rate.
  float tau_lr_scale = 0.1f;
  /// Element-wise clip on threshold gradients. The straight-through chain
  /// multiplies by 2/T at mask entries near the threshold, which produces
  /// rare but enormous spikes; clipping keeps τ steps bounded.
  float tau_grad_clip = 5.0f;
  /// When true, thresholds are never updated (used when target sparsity = 0).
  bool freeze_thresholds = false;
};

/// Momentum SGD for ordinary parameters; plain (momentum-free) clipped SGD
/// for mask thresholds with their own learning-rate scale.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<NamedParameter> params, const OptimizerConfig& cfg);

  /// Applies one update from the gradients currently on the parameters.
  /// Parameters whose gradient was never populated are skipped.
  void step(float lr);
  void zero_grad();

  /// Momentum buffers keyed by parameter name, for checkpointing.
  std::vector<std::pair<std::string, std::vector<float>*>> state();
  const std::vector<NamedParameter>& params() const { return params_; }

 private:
  std::vector<NamedParameter> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<float>> velocity_;  // parallel to params_
};

}  // namespace sdconv
