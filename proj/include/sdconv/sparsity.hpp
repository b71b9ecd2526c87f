#pragma once

#include <vector>

#include "sdconv/layers.hpp"
#include "sdconv/tensor.hpp"

namespace sdconv {

/// Iterative pruning schedule: the density target starts at 1 (fully dense)
/// and steps down a geometric staircase every `phase_len` steps until it
/// reaches the final density 1 - target_sparsity after n phases.
struct SparsitySchedule {
  float target_sparsity = 0.0f;   // s in [0,1)
  int iterations = 1;             // n >= 1
  long long total_steps = 1;
  long long phase_len = 1;        // steps between target updates
  float current_density = 1.0f;   // current target s̄_t

  static SparsitySchedule make(float target_sparsity, int iterations, long long total_steps);

  /// Advances the target for 1-based step t and returns the target in force
  /// for that step. Piecewise constant; updates only when t is a phase
  /// boundary. The exponent is clamped at 1 so the target never undershoots
  /// the requested final density.
  float advance(long long t);
};

/// L0 budget penalty over the soft masks registered in a forward pass:
/// ReLU((Σ weighted nnz − target_density · Σ mask sizes) / Σ mask sizes).
/// Zero when at or under budget; linear in the excess density above it.
/// Returns a graph scalar (differentiable through the soft masks); a constant
/// zero when no masks were registered.
Tensor l0_penalty(const std::vector<MaskRecord>& masks, float target_density);

struct LossBreakdown {
  Tensor total;          // graph scalar: task + λs·sparsity + λr·decay
  float task = 0.0f;     // cross-entropy component
  float sparsity = 0.0f; // L0 penalty component (before λs)
  float decay = 0.0f;    // 0.5·Σ‖w‖² over decaying parameters (before λr)
};

/// Composite training loss. Weight decay is part of the graph (gradient
/// λr·w), applied to every parameter with apply_decay set (thresholds are
/// excluded at parameter construction).
LossBreakdown total_loss(const Tensor& logits, const std::vector<int>& labels,
                         const std::vector<MaskRecord>& masks, float target_density,
                         float lambda_s, float lambda_r,
                         const std::vector<NamedParameter>& params);

}  // namespace sdconv
