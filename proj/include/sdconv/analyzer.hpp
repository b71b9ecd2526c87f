#pragma once

#include <string>
#include <vector>

#include "sdconv/layers.hpp"
#include "sdconv/tensor.hpp"

namespace sdconv {

// ---- sparsity measurement ---------------------------------------------------

/// Per-layer mask statistics, computed by exact zero-counting over the hard
/// masks. Layer sparsity is the zero fraction over all k masked kernels;
/// kernel sparsity is the fraction of positions zeroed in every expert (the
/// aggregated kernel's zero set), which bounds the FLOPs reduction.
struct LayerSparsity {
  std::string layer;
  std::vector<double> expert_sparsity;  // zero fraction of each expert's mask
  double layer_sparsity = 0.0;
  double kernel_sparsity = 0.0;
  size_t maskable = 0;  // k * weights per expert
  size_t kept = 0;      // mask entries equal to 1, summed over experts
};

struct SparsityReport {
  std::vector<LayerSparsity> layers;
  double global_density = 1.0;  // kept / maskable over all dynamic layers

  std::string to_text() const;  // key=value lines, layer-prefixed
  std::string to_csv() const;   // layer,expert_min,layer_sparsity,kernel_sparsity
};

/// Measures current masks of every dynamic layer (modes with masks). Layers
/// in static mode and plain conv layers do not contribute.
SparsityReport measure_sparsity(Model& model);

// ---- cost accounting ----------------------------------------------------------

/// One costed operation. The MAC convention: a multiply-accumulate is one
/// unit; convolutions cost out_c·(in_c/groups)·kh·kw·oh·ow per sample, linear
/// layers in·out, batch norm contributes parameters but no MACs. Dynamic
/// layers additionally cost their attention branch (pool + two matmuls +
/// softmax) and the k-way kernel aggregation (k MACs per kept position plus
/// k per output-channel bias).
struct CostEntry {
  enum class Kind { kConv, kBatchNorm, kLinear, kDynamic };
  Kind kind = Kind::kConv;
  std::string name;

  // conv / dynamic geometry (one sample)
  long long out_c = 0;
  long long in_c_per_group = 0;
  long long k_h = 0, k_w = 0;
  long long out_h = 0, out_w = 0;
  bool bias = false;

  long long channels = 0;                      // batch norm
  long long in_features = 0, out_features = 0; // linear
  bool classifier = false;                     // excluded from backbone params

  long long num_experts = 1;                   // dynamic
  long long attn_in_c = 0, attn_in_h = 0, attn_in_w = 0, attn_hidden = 0;
  double kernel_density = 1.0;                 // kept fraction of aggregated kernel
};

struct CostModel {
  std::string name;
  int input_c = 3;
  int input_h = 224;
  int input_w = 224;
  std::vector<CostEntry> entries;
};

struct LayerCost {
  std::string name;
  long long params = 0;
  long long macs_dense = 0;
  long long macs_sparse = 0;
};

struct CostReport {
  std::string model;
  int input_c = 0, input_h = 0, input_w = 0;
  long long params_total = 0;     // every trainable scalar, classifier included
  long long params_backbone = 0;  // params_total minus classifier layers
  long long macs_dense = 0;       // per-sample forward cost, masks ignored
  long long macs_sparse = 0;      // same, skipping masked aggregated-kernel zeros
  std::vector<LayerCost> layers;

  std::string to_text() const;
  std::string to_csv() const;
};

CostReport count_cost(const CostModel& model);

/// Builds the cost description of a live model at the given input size,
/// reading current kernel densities from the masks. Throws AnalysisError for
/// layer kinds it cannot cost.
CostModel cost_model_from(Model& model, int input_c, int input_h, int input_w);

// ---- sparse execution -----------------------------------------------------------

struct SparseLayerMacs {
  std::string layer;
  long long conv_dense = 0;   // batch total
  long long conv_sparse = 0;  // batch total over nonzero kernel positions
  long long overhead = 0;     // attention + aggregation, batch total
};

struct SparseForwardResult {
  Tensor output;
  long long macs_dense = 0;   // whole network, batch total
  long long macs_sparse = 0;
  std::vector<SparseLayerMacs> layers;
};

/// Inference over the model where every dynamic convolution executes on an
/// index list of the aggregated kernel's nonzero positions, recording exact
/// MAC counts. Numerically equal to the dense forward within 1e-5.
SparseForwardResult sparse_forward(Model& model, const Tensor& x,
                                   float attn_temperature = 1.0f);

}  // namespace sdconv
