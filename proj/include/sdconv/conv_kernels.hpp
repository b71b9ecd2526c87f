#pragma once

#include <cstdint>

namespace sdconv {

/**
 * @brief Validated geometry for a 2-D cross-correlation. Output extents obey
 *        out = floor((in + 2*padding - k) / stride) + 1.
 *
 * Weight layout is [out_c, in_c/groups, k_h, k_w]; input/output are NCHW.
 * Group g maps input channels [g*in_c/G, (g+1)*in_c/G) to output channels
 * [g*out_c/G, (g+1)*out_c/G).
 */
struct Conv2dGeom {
  int batch = 0;
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, k_h = 0, k_w = 0;
  int stride = 1, padding = 0, groups = 1;
  int out_h = 0, out_w = 0;

  int64_t input_numel() const { return int64_t(batch) * in_c * in_h * in_w; }
  int64_t output_numel() const { return int64_t(batch) * out_c * out_h * out_w; }
  int64_t weight_numel() const { return int64_t(out_c) * (in_c / groups) * k_h * k_w; }
};

/// Computes output extents and checks divisibility; throws DimensionError.
Conv2dGeom make_conv2d_geom(int batch, int in_c, int in_h, int in_w, int out_c, int k_h, int k_w,
                            int stride, int padding, int groups);

/// Production kernels: OpenMP-parallel, deterministic for any thread count
/// (every output element is owned by exactly one iteration).
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const Conv2dGeom& g);
void conv2d_backward_input(const float* w, const float* dy, float* dx, const Conv2dGeom& g);
void conv2d_backward_weight(const float* x, const float* dy, float* dw, const Conv2dGeom& g);
void conv2d_backward_bias(const float* dy, float* db, const Conv2dGeom& g);

/// Row-major matmul: c[m,n] = sum_k a[m,k] * b[k,n] (+= when accumulate).
void matmul_mk_kn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);

namespace reference {

/// Serial nested-loop implementation kept as the testing/benchmark oracle.
/// Accumulation order (in_c, k_h, k_w) matches the production kernel.
void conv2d_forward_serial(const float* x, const float* w, const float* bias, float* y,
                           const Conv2dGeom& g);

}  // namespace reference

}  // namespace sdconv
