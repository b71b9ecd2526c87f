#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sdconv/ops.hpp"
#include "sdconv/rng.hpp"
#include "sdconv/tensor.hpp"

namespace sdconv {

/// A named, trainable tensor. `is_threshold` marks the mask threshold, which
/// the optimizer updates with plain (momentum-free) SGD and its own learning
/// rate; `apply_decay` excludes a parameter from weight decay.
struct Parameter {
  std::string local_name;
  Tensor value;
  bool is_threshold = false;
  bool apply_decay = true;
};

struct NamedParameter {
  std::string name;  // "<layer>.<local>"
  Parameter* param = nullptr;
};

/// One soft-mask registration: the L0 penalty over a forward pass is built
/// from these records. `multiplier` scales sum(soft) (k for a mask shared by
/// k experts); `logical_numel` is this layer's contribution to the mask-size
/// normalizer.
struct MaskRecord {
  Tensor soft;
  float multiplier = 1.0f;
  size_t logical_numel = 0;
};

/// Per-forward state: training flag, the annealed attention temperature, and
/// the soft masks registered by sparse layers for the budget penalty.
struct ForwardCtx {
  bool training = false;
  float attn_temperature = 1.0f;
  std::vector<MaskRecord> masks;
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const { return name_; }
  virtual Tensor forward(const Tensor& x, ForwardCtx& ctx) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }

 private:
  std::string name_;
};

// ---------------------------------------------------------------------------

struct StaticConvConfig {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  bool bias = true;
};

class StaticConv2d : public Layer {
 public:
  StaticConv2d(std::string name, const StaticConvConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
  std::vector<Parameter*> parameters() override;
  const StaticConvConfig& config() const { return cfg_; }

 private:
  StaticConvConfig cfg_;
  Parameter weight_;
  Parameter bias_;
};

// ---------------------------------------------------------------------------

/// How expert kernels are masked.
///  - kDynamicDense: no pruning; constant all-ones masks (reference mode).
///  - kSparseDifferent: per-expert scores S_i = |W_i|, one mask per expert.
///  - kSparseSame: one shared mask from S = mean_i |W_i|, applied to all.
///  - kStatic: expert 0 only, no attention, no masks (plain convolution).
enum class MaskMode { kDynamicDense, kSparseDifferent, kSparseSame, kStatic };

MaskMode mask_mode_from_string(const std::string& text);
std::string to_string(MaskMode mode);

struct SDConvConfig {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  int num_experts = 4;
  int reduce_ratio = 16;
  float sharpness = 1.0f / 1024.0f;
  MaskMode mode = MaskMode::kSparseDifferent;
};

/// Per-expert masks as used in one forward pass. For the shared-mask mode all
/// entries alias the same underlying tensor and `shared` is true.
struct LayerMasks {
  std::vector<Tensor> soft;
  std::vector<Tensor> hard;
  bool shared = false;
  bool thresholded = false;  // true when masks came from the learnable threshold
};

/// Dynamic convolution with k expert kernels: an attention branch mixes the
/// experts per sample, a learnable threshold prunes their weights, and the
/// batch runs as one grouped convolution over per-sample aggregated kernels.
class SDConv2d : public Layer {
 public:
  SDConv2d(std::string name, const SDConvConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
  std::vector<Parameter*> parameters() override;

  /// Attention weights for a batch: global average pool, bottleneck MLP,
  /// temperature-scaled softmax. Shape [N, k]; rows sum to 1.
  Tensor attention_weights(const Tensor& x, float temperature);

  /// Builds the per-expert masks for the current parameters (graph-connected
  /// unless overridden or dense).
  LayerMasks build_masks() const;

  /// Replaces threshold-derived masks with fixed binary masks (one per
  /// expert, matching the expert weight shape). Used by one-shot magnitude
  /// pruning. Pass an empty vector to restore threshold masking.
  void set_fixed_masks(std::vector<Tensor> masks);
  bool has_fixed_masks() const { return !fixed_masks_.empty(); }

  /// Reference implementation: per-sample aggregation and convolution in a
  /// plain loop. Kept as a test oracle for the batched grouped-conv path.
  Tensor forward_loop_reference(const Tensor& x, ForwardCtx& ctx);

  const SDConvConfig& config() const { return cfg_; }
  const Parameter& expert(int i) const { return experts_[size_t(i)]; }
  const Parameter& expert_bias(int i) const { return biases_[size_t(i)]; }
  const Parameter& threshold() const { return tau_; }
  Parameter& mutable_threshold() { return tau_; }

 private:
  void register_masks(ForwardCtx& ctx, const LayerMasks& masks) const;

  SDConvConfig cfg_;
  std::vector<Parameter> experts_;
  std::vector<Parameter> biases_;
  Parameter attn_reduce_;
  Parameter attn_expand_;
  Parameter tau_;
  std::vector<Tensor> fixed_masks_;
};

// ---------------------------------------------------------------------------

class ReLULayer : public Layer {
 public:
  explicit ReLULayer(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
};

class GlobalAvgPoolLayer : public Layer {
 public:
  explicit GlobalAvgPoolLayer(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
};

class DenseLayer : public Layer {
 public:
  DenseLayer(std::string name, int in_features, int out_features, Rng& rng);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) override;
  std::vector<Parameter*> parameters() override;

 private:
  int in_features_;
  int out_features_;
  Parameter weight_;
  Parameter bias_;
};

// ---------------------------------------------------------------------------

/// A sequential stack of layers with uniquely named parameters.
class Model {
 public:
  Layer* add(std::unique_ptr<Layer> layer);
  Tensor forward(const Tensor& x, ForwardCtx& ctx);

  std::vector<NamedParameter> parameters();
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }
  Layer* find(const std::string& name);

  /// All SDConv2d layers in order, for analysis and experiment drivers.
  std::vector<SDConv2d*> sdconv_layers();

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace sdconv
