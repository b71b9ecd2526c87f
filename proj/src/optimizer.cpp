#include "sdconv/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "sdconv/error.hpp"

namespace sdconv {

float cosine_warmup_lr(long long step, float max_lr, long long warmup_steps,
                       long long total_steps) {
  if (warmup_steps < 0 || total_steps <= warmup_steps) {
    throw ContractError("learning-rate schedule requires 0 <= warmup_steps < total_steps");
  }
  if (step < 0) throw ContractError("learning-rate schedule step must be >= 0");
  if (step < warmup_steps) {
    return max_lr * float(double(step) / double(warmup_steps));
  }
  if (step >= total_steps) return 0.0f;
  double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return static_cast<float>(double(max_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
}

SgdOptimizer::SgdOptimizer(std::vector<NamedParameter> params, const OptimizerConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg.momentum >= 0.0f && cfg.momentum < 1.0f)) {
    throw ConfigError("momentum must lie in [0,1)");
  }
  if (!(cfg.tau_lr_scale > 0.0f)) throw ConfigError("threshold lr scale must be positive");
  if (!(cfg.tau_grad_clip > 0.0f)) throw ConfigError("threshold gradient clip must be positive");
  velocity_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].param->is_threshold) {
      velocity_[i].assign(params_[i].param->value.size(), 0.0f);
    }
  }
}

void SgdOptimizer::step(float lr) {
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i].param;
    auto& node = *p.value.handle();
    if (node.grad.empty()) continue;  // parameter unused this step

    std::vector<float>& values = p.value.mutable_values();
    if (p.is_threshold) {
      if (cfg_.freeze_thresholds) continue;
      float tau_lr = lr * cfg_.tau_lr_scale;
      for (size_t j = 0; j < values.size(); ++j) {
        float g = std::clamp(node.grad[j], -cfg_.tau_grad_clip, cfg_.tau_grad_clip);
        values[j] -= tau_lr * g;
      }
      continue;
    }

    std::vector<float>& v = velocity_[i];
    for (size_t j = 0; j < values.size(); ++j) {
      v[j] = cfg_.momentum * v[j] + node.grad[j];
      values[j] -= lr * v[j];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& named : params_) named.param->value.zero_grad();
}

std::vector<std::pair<std::string, std::vector<float>*>> SgdOptimizer::state() {
  std::vector<std::pair<std::string, std::vector<float>*>> out;
  for (size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].param->is_threshold) continue;
    out.emplace_back("opt.v." + params_[i].name, &velocity_[i]);
  }
  return out;
}

}  // namespace sdconv
