#include "sdconv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sdconv/error.hpp"

namespace sdconv {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr fresh(const Shape& shape, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->values.resize(shape_numel(shape));
  node->requires_grad = requires_grad;
  return node;
}

bool track(const Tensor& a) { return grad_enabled() && a.requires_grad(); }

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

/// Adds src into dst.grad (allocating it on first touch).
void accumulate(Node& dst, const float* src, int64_t n) {
  dst.ensure_grad();
  for (int64_t i = 0; i < n; ++i) dst.grad[i] += src[i];
}

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast binary_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.size() == 1) return Broadcast::kLeftScalar;
  if (b.size() == 1) return Broadcast::kRightScalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) +
                       " vs " + shape_to_string(b.shape()));
}

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a,
                 BwdB bwd_b) {
  check_defined(a, name);
  check_defined(b, name);
  Broadcast mode = binary_broadcast(a, b, name);
  const Shape& out_shape = (mode == Broadcast::kLeftScalar) ? b.shape() : a.shape();
  bool rg = grad_enabled() && (a.requires_grad() || b.requires_grad());
  NodePtr out = fresh(out_shape, rg);
  const auto& av = a.values();
  const auto& bv = b.values();
  int64_t n = shape_numel(out_shape);
  for (int64_t i = 0; i < n; ++i) {
    float x = (mode == Broadcast::kLeftScalar) ? av[0] : av[i];
    float y = (mode == Broadcast::kRightScalar) ? bv[0] : bv[i];
    out->values[i] = fwd(x, y);
  }
  if (rg) {
    auto an = a.handle();
    auto bn = b.handle();
    out->parents = {an, bn};
    out->backward_fn = [an, bn, mode, n, bwd_a, bwd_b](Node& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          float x = (mode == Broadcast::kLeftScalar) ? an->values[0] : an->values[i];
          float y = (mode == Broadcast::kRightScalar) ? bn->values[0] : bn->values[i];
          float g = self.grad[i] * bwd_a(x, y);
          an->grad[(mode == Broadcast::kLeftScalar) ? 0 : i] += g;
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          float x = (mode == Broadcast::kLeftScalar) ? an->values[0] : an->values[i];
          float y = (mode == Broadcast::kRightScalar) ? bn->values[0] : bn->values[i];
          float g = self.grad[i] * bwd_b(x, y);
          bn->grad[(mode == Broadcast::kRightScalar) ? 0 : i] += g;
        }
      }
    };
  }
  return Tensor::wrap(out);
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd_factor) {
  check_defined(a, name);
  bool rg = track(a);
  NodePtr out = fresh(a.shape(), rg);
  const auto& av = a.values();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out->values[i] = fwd(av[i]);
  if (rg) {
    auto an = a.handle();
    out->parents = {an};
    out->backward_fn = [an, n, bwd_factor](Node& self) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        an->grad[i] += self.grad[i] * bwd_factor(an->values[i], self.values[i]);
      }
    };
  }
  return Tensor::wrap(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
      [](float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
      [](float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](float x, float y) { return x * y; }, [](float, float y) { return y; },
      [](float x, float) { return x; });
}

Tensor scale(const Tensor& a, float factor) {
  return unary_op(
      a, "scale", [factor](float x) { return x * factor; },
      [factor](float, float) { return factor; });
}

Tensor add_const(const Tensor& a, float constant) {
  return unary_op(
      a, "add_const", [constant](float x) { return x + constant; },
      [](float, float) { return 1.0f; });
}

Tensor abs_val(const Tensor& a) {
  return unary_op(
      a, "abs_val", [](float x) { return std::fabs(x); },
      [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid", [](float x) { return stable_sigmoid(x); },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor ste_round(const Tensor& a) {
  // Straight-through estimator: forward rounds (0.5 -> 1), backward is the
  // identity so gradients reach the soft mask unchanged.
  return unary_op(
      a, "ste_round", [](float x) { return std::floor(x + 0.5f); },
      [](float, float) { return 1.0f; });
}

Tensor threshold_soft_mask(const Tensor& scores, const Tensor& tau, float sharpness) {
  check_defined(scores, "threshold_soft_mask");
  check_defined(tau, "threshold_soft_mask");
  if (tau.size() != 1) {
    throw DimensionError("threshold_soft_mask: tau must be a scalar, got " +
                         shape_to_string(tau.shape()));
  }
  if (!(sharpness > 0.0f)) {
    throw ContractError("threshold_soft_mask: sharpness must be positive");
  }
  const float inv_sharpness = 1.0f / sharpness;
  bool rg = grad_enabled() && (scores.requires_grad() || tau.requires_grad());
  NodePtr out = fresh(scores.shape(), rg);
  const auto& sv = scores.values();
  const float tau_value = tau.values()[0];
  int64_t n = scores.size();
  for (int64_t i = 0; i < n; ++i) {
    float d = sv[i] - tau_value;
    float psi1 = stable_sigmoid(d);
    float two_psi = 2.0f * psi1;
    float centered = two_psi - 1.0f;
    out->values[i] = stable_sigmoid(centered * inv_sharpness);
  }
  if (rg) {
    auto sn = scores.handle();
    auto tn = tau.handle();
    out->parents = {sn, tn};
    out->backward_fn = [sn, tn, n, inv_sharpness](Node& self) {
      // dM~/dS = sig'(z) * (2/T) * sig'(d), dM~/dtau = -dM~/dS.
      float tau_v = tn->values[0];
      double tau_acc = 0.0;
      bool want_scores = sn->requires_grad;
      if (want_scores) sn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        float d = sn->values[i] - tau_v;
        float psi1 = stable_sigmoid(d);
        float m = self.values[i];
        float factor = m * (1.0f - m) * 2.0f * inv_sharpness * psi1 * (1.0f - psi1);
        float g = self.grad[i] * factor;
        if (want_scores) sn->grad[i] += g;
        tau_acc -= g;
      }
      if (tn->requires_grad) {
        tn->ensure_grad();
        tn->grad[0] += static_cast<float>(tau_acc);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor sum_all(const Tensor& a) {
  check_defined(a, "sum_all");
  bool rg = track(a);
  NodePtr out = fresh({1}, rg);
  const auto& av = a.values();
  double acc = 0.0;
  for (float v : av) acc += v;
  out->values[0] = static_cast<float>(acc);
  if (rg) {
    auto an = a.handle();
    out->parents = {an};
    out->backward_fn = [an](Node& self) {
      an->ensure_grad();
      float g = self.grad[0];
      for (auto& gv : an->grad) gv += g;
    };
  }
  return Tensor::wrap(out);
}

Tensor mean_all(const Tensor& a) {
  check_defined(a, "mean_all");
  return scale(sum_all(a), 1.0f / static_cast<float>(a.size()));
}

Tensor softmax_rows(const Tensor& a) {
  check_defined(a, "softmax_rows");
  if (a.shape().size() != 2) {
    throw DimensionError("softmax_rows expects [rows,cols], got " + shape_to_string(a.shape()));
  }
  int rows = a.shape()[0], cols = a.shape()[1];
  bool rg = track(a);
  NodePtr out = fresh(a.shape(), rg);
  const auto& av = a.values();
  for (int r = 0; r < rows; ++r) {
    const float* in = av.data() + int64_t(r) * cols;
    float* dst = out->values.data() + int64_t(r) * cols;
    float row_max = in[0];
    for (int c = 1; c < cols; ++c) row_max = std::max(row_max, in[c]);
    float denom = 0.0f;
    for (int c = 0; c < cols; ++c) {
      dst[c] = std::exp(in[c] - row_max);
      denom += dst[c];
    }
    float inv = 1.0f / denom;
    for (int c = 0; c < cols; ++c) dst[c] *= inv;
  }
  if (rg) {
    auto an = a.handle();
    out->parents = {an};
    out->backward_fn = [an, rows, cols](Node& self) {
      an->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const float* s = self.values.data() + int64_t(r) * cols;
        const float* g = self.grad.data() + int64_t(r) * cols;
        float* dst = an->grad.data() + int64_t(r) * cols;
        float dot = 0.0f;
        for (int c = 0; c < cols; ++c) dot += s[c] * g[c];
        for (int c = 0; c < cols; ++c) dst[c] += s[c] * (g[c] - dot);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  bool rg = grad_enabled() && (a.requires_grad() || b.requires_grad());
  NodePtr out = fresh({m, n}, rg);
  matmul_mk_kn(a.values().data(), b.values().data(), out->values.data(), m, k, n, false);
  if (rg) {
    auto an = a.handle();
    auto bn = b.handle();
    out->parents = {an, bn};
    out->backward_fn = [an, bn, m, k, n](Node& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        // dA[i,p] += sum_j dC[i,j] * B[p,j]
        for (int i = 0; i < m; ++i) {
          const float* gc = self.grad.data() + int64_t(i) * n;
          float* ga = an->grad.data() + int64_t(i) * k;
          for (int p = 0; p < k; ++p) {
            const float* brow = bn->values.data() + int64_t(p) * n;
            float acc = 0.0f;
            for (int j = 0; j < n; ++j) acc += gc[j] * brow[j];
            ga[p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB[p,j] += sum_i A[i,p] * dC[i,j]
        for (int i = 0; i < m; ++i) {
          const float* arow = an->values.data() + int64_t(i) * k;
          const float* gc = self.grad.data() + int64_t(i) * n;
          for (int p = 0; p < k; ++p) {
            float av = arow[p];
            if (av == 0.0f) continue;
            float* gb = bn->grad.data() + int64_t(p) * n;
            for (int j = 0; j < n; ++j) gb[j] += av * gc[j];
          }
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  check_defined(x, "add_row_bias");
  check_defined(bias, "add_row_bias");
  if (x.shape().size() != 2 || bias.shape().size() != 1 || bias.shape()[0] != x.shape()[1]) {
    throw DimensionError("add_row_bias: shapes " + shape_to_string(x.shape()) + " + " +
                         shape_to_string(bias.shape()));
  }
  int m = x.shape()[0], n = x.shape()[1];
  bool rg = grad_enabled() && (x.requires_grad() || bias.requires_grad());
  NodePtr out = fresh(x.shape(), rg);
  const auto& xv = x.values();
  const auto& bv = bias.values();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out->values[int64_t(i) * n + j] = xv[int64_t(i) * n + j] + bv[j];
    }
  }
  if (rg) {
    auto xn = x.handle();
    auto bn = bias.handle();
    out->parents = {xn, bn};
    out->backward_fn = [xn, bn, m, n](Node& self) {
      if (xn->requires_grad) accumulate(*xn, self.grad.data(), int64_t(m) * n);
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) bn->grad[j] += self.grad[int64_t(i) * n + j];
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor global_avg_pool(const Tensor& x) {
  check_defined(x, "global_avg_pool");
  if (x.shape().size() != 4) {
    throw DimensionError("global_avg_pool expects [N,C,H,W], got " + shape_to_string(x.shape()));
  }
  int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  int64_t plane = int64_t(h) * w;
  bool rg = track(x);
  NodePtr out = fresh({n, c}, rg);
  const auto& xv = x.values();
  float inv = 1.0f / static_cast<float>(plane);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const float* src = xv.data() + (int64_t(i) * c + j) * plane;
      float acc = 0.0f;
      for (int64_t p = 0; p < plane; ++p) acc += src[p];
      out->values[int64_t(i) * c + j] = acc * inv;
    }
  }
  if (rg) {
    auto xn = x.handle();
    out->parents = {xn};
    out->backward_fn = [xn, n, c, plane, inv](Node& self) {
      xn->ensure_grad();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) {
          float g = self.grad[int64_t(i) * c + j] * inv;
          float* dst = xn->grad.data() + (int64_t(i) * c + j) * plane;
          for (int64_t p = 0; p < plane; ++p) dst[p] += g;
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  check_defined(a, "reshape");
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(shape));
  }
  bool rg = track(a);
  NodePtr out = fresh(shape, rg);
  out->values = a.values();
  if (rg) {
    auto an = a.handle();
    out->parents = {an};
    out->backward_fn = [an](Node& self) {
      accumulate(*an, self.grad.data(), static_cast<int64_t>(self.grad.size()));
    };
  }
  return Tensor::wrap(out);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: empty input");
  int64_t p = rows[0].size();
  bool rg = false;
  for (const auto& t : rows) {
    check_defined(t, "stack_rows");
    if (t.size() != p) {
      throw DimensionError("stack_rows: element count mismatch " + std::to_string(t.size()) +
                           " vs " + std::to_string(p));
    }
    rg = rg || t.requires_grad();
  }
  rg = rg && grad_enabled();
  int k = static_cast<int>(rows.size());
  NodePtr out = fresh({k, static_cast<int>(p)}, rg);
  for (int i = 0; i < k; ++i) {
    std::memcpy(out->values.data() + int64_t(i) * p, rows[i].values().data(), p * sizeof(float));
  }
  if (rg) {
    for (const auto& t : rows) out->parents.push_back(t.handle());
    out->backward_fn = [p](Node& self) {
      int k = static_cast<int>(self.parents.size());
      for (int i = 0; i < k; ++i) {
        Node& parent = *self.parents[i];
        if (!parent.requires_grad) continue;
        parent.ensure_grad();
        const float* src = self.grad.data() + int64_t(i) * p;
        for (int64_t j = 0; j < p; ++j) parent.grad[j] += src[j];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvSpec& spec) {
  check_defined(x, "conv2d");
  check_defined(w, "conv2d");
  if (x.shape().size() != 4) {
    throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_to_string(x.shape()));
  }
  if (w.shape().size() != 4) {
    throw DimensionError("conv2d: weight must be [out_c,in_c/groups,k_h,k_w], got " +
                         shape_to_string(w.shape()));
  }
  Conv2dGeom geom = make_conv2d_geom(x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3],
                                     w.shape()[0], w.shape()[2], w.shape()[3], spec.stride,
                                     spec.padding, spec.groups);
  if (w.shape()[1] != geom.in_c / geom.groups) {
    throw DimensionError("conv2d: weight in-channel extent " + std::to_string(w.shape()[1]) +
                         " != in_c/groups = " + std::to_string(geom.in_c / geom.groups));
  }
  const float* bias_ptr = nullptr;
  if (bias.defined()) {
    if (bias.shape().size() != 1 || bias.shape()[0] != geom.out_c) {
      throw DimensionError("conv2d: bias must be [out_c], got " + shape_to_string(bias.shape()));
    }
    bias_ptr = bias.values().data();
  }
  bool rg = grad_enabled() &&
            (x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad()));
  NodePtr out = fresh({geom.batch, geom.out_c, geom.out_h, geom.out_w}, rg);
  conv2d_forward(x.values().data(), w.values().data(), bias_ptr, out->values.data(), geom);
  if (rg) {
    auto xn = x.handle();
    auto wn = w.handle();
    NodePtr bn = bias.defined() ? bias.handle() : nullptr;
    out->parents = {xn, wn};
    if (bn) out->parents.push_back(bn);
    out->backward_fn = [xn, wn, bn, geom](Node& self) {
      if (xn->requires_grad) {
        std::vector<float> dx(geom.input_numel());
        conv2d_backward_input(wn->values.data(), self.grad.data(), dx.data(), geom);
        accumulate(*xn, dx.data(), geom.input_numel());
      }
      if (wn->requires_grad) {
        std::vector<float> dw(geom.weight_numel());
        conv2d_backward_weight(xn->values.data(), self.grad.data(), dw.data(), geom);
        accumulate(*wn, dw.data(), geom.weight_numel());
      }
      if (bn && bn->requires_grad) {
        std::vector<float> db(geom.out_c);
        conv2d_backward_bias(self.grad.data(), db.data(), geom);
        accumulate(*bn, db.data(), geom.out_c);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  check_defined(logits, "cross_entropy_mean");
  if (logits.shape().size() != 2) {
    throw DimensionError("cross_entropy_mean expects [N,classes], got " +
                         shape_to_string(logits.shape()));
  }
  int n = logits.shape()[0], classes = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n) {
    throw DimensionError("cross_entropy_mean: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(n));
  }
  for (int label : labels) {
    if (label < 0 || label >= classes) {
      throw DataError("cross_entropy_mean: label " + std::to_string(label) +
                      " outside [0," + std::to_string(classes - 1) + "]");
    }
  }
  bool rg = track(logits);
  NodePtr out = fresh({1}, rg);
  const auto& lv = logits.values();
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const float* row = lv.data() + int64_t(r) * classes;
    float row_max = row[0];
    for (int c = 1; c < classes; ++c) row_max = std::max(row_max, row[c]);
    double denom = 0.0;
    for (int c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(row[c]) - row_max);
    total += std::log(denom) + row_max - row[labels[r]];
  }
  out->values[0] = static_cast<float>(total / n);
  if (rg) {
    auto ln = logits.handle();
    out->parents = {ln};
    out->backward_fn = [ln, labels, n, classes](Node& self) {
      ln->ensure_grad();
      float g = self.grad[0] / static_cast<float>(n);
      for (int r = 0; r < n; ++r) {
        const float* row = ln->values.data() + int64_t(r) * classes;
        float* dst = ln->grad.data() + int64_t(r) * classes;
        float row_max = row[0];
        for (int c = 1; c < classes; ++c) row_max = std::max(row_max, row[c]);
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(row[c]) - row_max);
        for (int c = 0; c < classes; ++c) {
          float softmax = static_cast<float>(std::exp(static_cast<double>(row[c]) - row_max) / denom);
          dst[c] += g * (softmax - (labels[r] == c ? 1.0f : 0.0f));
        }
      }
    };
  }
  return Tensor::wrap(out);
}

}  // namespace sdconv
