#pragma once

#include <cmath>
#include <vector>

#include "sdconv/conv_kernels.hpp"
#include "sdconv/tensor.hpp"

namespace sdconv {

/// Numerically stable logistic function; shared by ops and tests.
inline float stable_sigmoid(float x) {
  if (x >= 0.0f) {
    return 1.0f / (1.0f + std::exp(-x));
  }
  float e = std::exp(x);
  return e / (1.0f + e);
}

/// Convolution hyper-parameters carried by layers (geometry minus shapes).
struct ConvSpec {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

// ---- elementwise suite ----------------------------------------------------
// Binary ops accept equal shapes, or a single-element tensor on either side
// (broadcast against the other operand).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_const(const Tensor& a, float constant);
Tensor abs_val(const Tensor& a);  // subgradient: sign, with sign(0) = 0
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

/// Hard rounding with a straight-through gradient (identity backward).
/// round(0.5) = 1: ties go to the kept side.
Tensor ste_round(const Tensor& a);

/// Sharpened two-way softmax over threshold distances:
/// psi1 = sigmoid(score - tau), soft = sigmoid((2*psi1 - 1) / sharpness).
/// Gradients flow to both the scores and the scalar threshold.
Tensor threshold_soft_mask(const Tensor& scores, const Tensor& tau, float sharpness);

// ---- reductions and linear algebra ----------------------------------------
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor softmax_rows(const Tensor& a);  // [N,K] rows sum to 1
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // [M,N] + [N]
Tensor global_avg_pool(const Tensor& x);                   // [N,C,H,W] -> [N,C]
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor stack_rows(const std::vector<Tensor>& rows);  // k tensors -> [k, numel]

/// 2-D cross-correlation, NCHW; bias may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvSpec& spec);

/// Mean negative log-likelihood with a fused, stable log-softmax.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

}  // namespace sdconv
