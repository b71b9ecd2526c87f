#pragma once

#include <string>
#include <vector>

#include "sdconv/analyzer.hpp"
#include "sdconv/layers.hpp"
#include "sdconv/rng.hpp"

namespace sdconv {

/// Options for building zoo cost models. `num_experts` below 2 degenerates a
/// dynamic variant to the static architecture (single kernel, no attention).
struct ZooOptions {
  int num_experts = 4;
  int reduce_ratio = 16;
  int num_classes = 1000;
};

/// Declarative architecture descriptions for cost accounting. Known ids:
/// resnet10, resnet18, resnet50, mobilenetv2-0.5, mobilenetv2-0.75,
/// mobilenetv2-1.0, each optionally prefixed "dy-" for the dynamic variant
/// (every convolution except the first becomes a k-expert dynamic layer).
CostModel build_cost_model(const std::string& id, int resolution,
                           const ZooOptions& options = {});

std::vector<std::string> zoo_model_ids();

// ---------------------------------------------------------------------------

/// Configuration of the desk-scale training model: a static stem convolution
/// followed by two dynamic convolution blocks and a linear classifier.
struct ToyModelConfig {
  int in_channels = 1;  // 1 for MNIST-shaped data, 3 for CIFAR-shaped data
  int num_classes = 10;
  int num_experts = 4;
  int reduce_ratio = 16;
  float sharpness = 1.0f / 1024.0f;
  MaskMode mode = MaskMode::kSparseDifferent;
};

Model build_toy_model(const ToyModelConfig& cfg, Rng& rng);

}  // namespace sdconv
