#include "sdconv/sparsity.hpp"

#include <algorithm>
#include <cmath>

#include "sdconv/error.hpp"
#include "sdconv/ops.hpp"

namespace sdconv {

SparsitySchedule SparsitySchedule::make(float target_sparsity, int iterations,
                                        long long total_steps) {
  if (!(target_sparsity >= 0.0f && target_sparsity < 1.0f)) {
    throw ConfigError("target sparsity must lie in [0,1)");
  }
  if (iterations < 1) throw ConfigError("pruning iterations must be >= 1");
  if (total_steps < 1) throw ConfigError("total steps must be >= 1");
  SparsitySchedule s;
  s.target_sparsity = target_sparsity;
  s.iterations = iterations;
  s.total_steps = total_steps;
  s.phase_len = total_steps / (iterations + 1);
  if (s.phase_len < 1) {
    throw ContractError("schedule needs at least iterations+1 steps (" +
                        std::to_string(total_steps) + " steps for " +
                        std::to_string(iterations) + " pruning iterations)");
  }
  s.current_density = 1.0f;
  return s;
}

float SparsitySchedule::advance(long long t) {
  if (t < 1 || t > total_steps) {
    throw ContractError("schedule step " + std::to_string(t) + " outside [1, " +
                        std::to_string(total_steps) + "]");
  }
  if (t % phase_len == 0) {
    double final_density = 1.0 - double(target_sparsity);
    double exponent = std::min(1.0, double(t) / (double(phase_len) * double(iterations)));
    current_density = static_cast<float>(std::pow(final_density, exponent));
  }
  return current_density;
}

Tensor l0_penalty(const std::vector<MaskRecord>& masks, float target_density) {
  if (masks.empty()) return Tensor::scalar(0.0f);
  double total_numel = 0.0;
  for (const auto& rec : masks) total_numel += double(rec.logical_numel);
  if (total_numel <= 0.0) return Tensor::scalar(0.0f);

  Tensor weighted_nnz;
  for (const auto& rec : masks) {
    Tensor part = scale(sum_all(rec.soft), rec.multiplier);
    weighted_nnz = weighted_nnz.defined() ? add(weighted_nnz, part) : part;
  }
  float budget = static_cast<float>(double(target_density) * total_numel);
  Tensor excess = scale(add_const(weighted_nnz, -budget), float(1.0 / total_numel));
  return relu(excess);
}

LossBreakdown total_loss(const Tensor& logits, const std::vector<int>& labels,
                         const std::vector<MaskRecord>& masks, float target_density,
                         float lambda_s, float lambda_r,
                         const std::vector<NamedParameter>& params) {
  LossBreakdown out;
  Tensor task = cross_entropy_mean(logits, labels);
  out.task = task.item();
  Tensor total = task;

  if (lambda_s != 0.0f && !masks.empty()) {
    Tensor penalty = l0_penalty(masks, target_density);
    out.sparsity = penalty.item();
    total = add(total, scale(penalty, lambda_s));
  }

  if (lambda_r != 0.0f) {
    Tensor decay;
    for (const auto& named : params) {
      if (!named.param->apply_decay) continue;
      Tensor sq = scale(sum_all(mul(named.param->value, named.param->value)), 0.5f);
      decay = decay.defined() ? add(decay, sq) : sq;
    }
    if (decay.defined()) {
      out.decay = decay.item();
      total = add(total, scale(decay, lambda_r));
    }
  }

  out.total = total;
  return out;
}

}  // namespace sdconv
