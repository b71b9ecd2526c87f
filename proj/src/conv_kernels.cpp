#include "sdconv/conv_kernels.hpp"

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "sdconv/error.hpp"

namespace sdconv {

Conv2dGeom make_conv2d_geom(int batch, int in_c, int in_h, int in_w, int out_c, int k_h, int k_w,
                            int stride, int padding, int groups) {
  Conv2dGeom g;
  g.batch = batch;
  g.in_c = in_c;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_c = out_c;
  g.k_h = k_h;
  g.k_w = k_w;
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  if (batch < 1 || in_c < 1 || in_h < 1 || in_w < 1 || out_c < 1 || k_h < 1 || k_w < 1) {
    throw DimensionError("conv2d: non-positive extent (batch=" + std::to_string(batch) +
                         " in_c=" + std::to_string(in_c) + " in_h=" + std::to_string(in_h) +
                         " in_w=" + std::to_string(in_w) + " out_c=" + std::to_string(out_c) +
                         " k=" + std::to_string(k_h) + "x" + std::to_string(k_w) + ")");
  }
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw DimensionError("conv2d: padding must be >= 0, got " + std::to_string(padding));
  if (groups < 1) throw DimensionError("conv2d: groups must be >= 1, got " + std::to_string(groups));
  if (in_c % groups != 0 || out_c % groups != 0) {
    throw DimensionError("conv2d: groups=" + std::to_string(groups) + " must divide in_c=" +
                         std::to_string(in_c) + " and out_c=" + std::to_string(out_c));
  }
  g.out_h = (in_h + 2 * padding - k_h) / stride + 1;
  g.out_w = (in_w + 2 * padding - k_w) / stride + 1;
  if (in_h + 2 * padding < k_h || in_w + 2 * padding < k_w || g.out_h < 1 || g.out_w < 1) {
    throw DimensionError("conv2d: kernel " + std::to_string(k_h) + "x" + std::to_string(k_w) +
                         " does not fit input " + std::to_string(in_h) + "x" +
                         std::to_string(in_w) + " with padding " + std::to_string(padding));
  }
  return g;
}

namespace {

/// Gathers one (sample, group) into a [cg*k_h*k_w, out_h*out_w] patch matrix.
/// Row order (cin, ky, kx) keeps the gemm accumulation order identical to the
/// plain nested-loop kernel.
void im2col_group(const float* x, const Conv2dGeom& g, int n, int group, float* col) {
  const int cg = g.in_c / g.groups;
  const int ohw = g.out_h * g.out_w;
  const float* xs = x + (int64_t(n) * g.in_c + int64_t(group) * cg) * g.in_h * g.in_w;
  for (int c = 0; c < cg; ++c) {
    const float* plane = xs + int64_t(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k_h; ++ky) {
      for (int kx = 0; kx < g.k_w; ++kx) {
        float* row = col + (int64_t(c) * g.k_h * g.k_w + ky * g.k_w + kx) * ohw;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.padding + ky;
          float* dst = row + int64_t(oy) * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = plane + int64_t(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.padding + kx;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

/// Scatter-adds a patch-gradient matrix back into the input gradient.
void col2im_group(const float* col, const Conv2dGeom& g, int n, int group, float* dx) {
  const int cg = g.in_c / g.groups;
  const int ohw = g.out_h * g.out_w;
  float* xs = dx + (int64_t(n) * g.in_c + int64_t(group) * cg) * g.in_h * g.in_w;
  for (int c = 0; c < cg; ++c) {
    float* plane = xs + int64_t(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k_h; ++ky) {
      for (int kx = 0; kx < g.k_w; ++kx) {
        const float* row = col + (int64_t(c) * g.k_h * g.k_w + ky * g.k_w + kx) * ohw;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          const float* src = row + int64_t(oy) * g.out_w;
          float* dst = plane + int64_t(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

thread_local std::vector<float> tl_col;

float* scratch_col(int64_t needed) {
  if (static_cast<int64_t>(tl_col.size()) < needed) tl_col.resize(needed);
  return tl_col.data();
}

}  // namespace

void matmul_mk_kn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + int64_t(m) * n, 0.0f);
#pragma omp parallel for
  for (int i = 0; i < m; ++i) {
    float* crow = c + int64_t(i) * n;
    for (int p = 0; p < k; ++p) {
      float av = a[int64_t(i) * k + p];
      if (av == 0.0f) continue;
      const float* brow = b + int64_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const Conv2dGeom& g) {
  const int cg_in = g.in_c / g.groups;
  const int cg_out = g.out_c / g.groups;
  const int kk = cg_in * g.k_h * g.k_w;
  const int ohw = g.out_h * g.out_w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < g.batch; ++n) {
    for (int group = 0; group < g.groups; ++group) {
      float* col = scratch_col(int64_t(kk) * ohw);
      im2col_group(x, g, n, group, col);
      for (int co = 0; co < cg_out; ++co) {
        int oc = group * cg_out + co;
        float* yrow = y + (int64_t(n) * g.out_c + oc) * ohw;
        float init = bias ? bias[oc] : 0.0f;
        std::fill(yrow, yrow + ohw, init);
        const float* wrow = w + int64_t(oc) * kk;
        for (int p = 0; p < kk; ++p) {
          float wv = wrow[p];
          const float* crow = col + int64_t(p) * ohw;
          for (int j = 0; j < ohw; ++j) yrow[j] += wv * crow[j];
        }
      }
    }
  }
}

void conv2d_backward_input(const float* w, const float* dy, float* dx, const Conv2dGeom& g) {
  const int cg_in = g.in_c / g.groups;
  const int cg_out = g.out_c / g.groups;
  const int kk = cg_in * g.k_h * g.k_w;
  const int ohw = g.out_h * g.out_w;
  std::fill(dx, dx + g.input_numel(), 0.0f);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < g.batch; ++n) {
    for (int group = 0; group < g.groups; ++group) {
      float* col = scratch_col(int64_t(kk) * ohw);
      std::fill(col, col + int64_t(kk) * ohw, 0.0f);
      // col[p, j] = sum_co w[co, p] * dy[co, j], then scatter back to image.
      for (int co = 0; co < cg_out; ++co) {
        int oc = group * cg_out + co;
        const float* dyrow = dy + (int64_t(n) * g.out_c + oc) * ohw;
        const float* wrow = w + int64_t(oc) * kk;
        for (int p = 0; p < kk; ++p) {
          float wv = wrow[p];
          if (wv == 0.0f) continue;
          float* crow = col + int64_t(p) * ohw;
          for (int j = 0; j < ohw; ++j) crow[j] += wv * dyrow[j];
        }
      }
      col2im_group(col, g, n, group, dx);
    }
  }
}

void conv2d_backward_weight(const float* x, const float* dy, float* dw, const Conv2dGeom& g) {
  const int cg_in = g.in_c / g.groups;
  const int cg_out = g.out_c / g.groups;
  const int kk = cg_in * g.k_h * g.k_w;
  const int ohw = g.out_h * g.out_w;
  std::fill(dw, dw + g.weight_numel(), 0.0f);
  // Serial over the batch so each dw element accumulates in a fixed order;
  // parallel across output channels, which partition dw disjointly.
  for (int n = 0; n < g.batch; ++n) {
    for (int group = 0; group < g.groups; ++group) {
      float* col = scratch_col(int64_t(kk) * ohw);
      im2col_group(x, g, n, group, col);
#pragma omp parallel for schedule(static)
      for (int co = 0; co < cg_out; ++co) {
        int oc = group * cg_out + co;
        const float* dyrow = dy + (int64_t(n) * g.out_c + oc) * ohw;
        float* wrow = dw + int64_t(oc) * kk;
        for (int p = 0; p < kk; ++p) {
          const float* crow = col + int64_t(p) * ohw;
          float acc = 0.0f;
          for (int j = 0; j < ohw; ++j) acc += dyrow[j] * crow[j];
          wrow[p] += acc;
        }
      }
    }
  }
}

void conv2d_backward_bias(const float* dy, float* db, const Conv2dGeom& g) {
  const int ohw = g.out_h * g.out_w;
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < g.out_c; ++oc) {
    float acc = 0.0f;
    for (int n = 0; n < g.batch; ++n) {
      const float* dyrow = dy + (int64_t(n) * g.out_c + oc) * ohw;
      for (int j = 0; j < ohw; ++j) acc += dyrow[j];
    }
    db[oc] = acc;
  }
}

namespace reference {

void conv2d_forward_serial(const float* x, const float* w, const float* bias, float* y,
                           const Conv2dGeom& g) {
  const int cg_in = g.in_c / g.groups;
  const int cg_out = g.out_c / g.groups;
  for (int n = 0; n < g.batch; ++n) {
    for (int group = 0; group < g.groups; ++group) {
      for (int co = 0; co < cg_out; ++co) {
        int oc = group * cg_out + co;
        for (int oy = 0; oy < g.out_h; ++oy) {
          for (int ox = 0; ox < g.out_w; ++ox) {
            float acc = bias ? bias[oc] : 0.0f;
            for (int c = 0; c < cg_in; ++c) {
              int ic = group * cg_in + c;
              for (int ky = 0; ky < g.k_h; ++ky) {
                int iy = oy * g.stride - g.padding + ky;
                if (iy < 0 || iy >= g.in_h) continue;
                for (int kx = 0; kx < g.k_w; ++kx) {
                  int ix = ox * g.stride - g.padding + kx;
                  if (ix < 0 || ix >= g.in_w) continue;
                  float xv = x[((int64_t(n) * g.in_c + ic) * g.in_h + iy) * g.in_w + ix];
                  float wv = w[((int64_t(oc) * cg_in + c) * g.k_h + ky) * g.k_w + kx];
                  acc += xv * wv;
                }
              }
            }
            y[((int64_t(n) * g.out_c + oc) * g.out_h + oy) * g.out_w + ox] = acc;
          }
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace sdconv
