#include "sdconv/analyzer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "sdconv/conv_kernels.hpp"
#include "sdconv/error.hpp"

namespace sdconv {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Per-output-channel index lists of the aggregated kernel's support: the
/// union of expert nonzero positions. Row r indexes (ci,ky,kx) in the same
/// order the dense kernels iterate, so skipping zeros preserves summation
/// order exactly.
std::vector<std::vector<int>> union_support(const LayerMasks& masks, int out_c,
                                            int row_len) {
  std::vector<std::vector<int>> support;
  support.resize(size_t(out_c));
  const int k = int(masks.hard.size());
  for (int co = 0; co < out_c; ++co) {
    auto& rows = support[size_t(co)];
    for (int r = 0; r < row_len; ++r) {
      size_t p = size_t(co) * row_len + r;
      bool keep = false;
      for (int i = 0; i < k && !keep; ++i) keep = masks.hard[size_t(i)].values()[p] != 0.0f;
      if (keep) rows.push_back(r);
    }
  }
  return support;
}

}  // namespace

// ---- sparsity measurement ------------------------------------------------------

SparsityReport measure_sparsity(Model& model) {
  NoGradGuard guard;
  SparsityReport report;
  size_t kept_total = 0, maskable_total = 0;

  for (SDConv2d* layer : model.sdconv_layers()) {
    if (layer->config().mode == MaskMode::kStatic) continue;
    LayerMasks masks = layer->build_masks();
    const int k = layer->config().num_experts;
    const size_t numel = layer->expert(0).value.size();

    LayerSparsity ls;
    ls.layer = layer->name();
    ls.maskable = numel * size_t(k);
    size_t zeros_all_experts = 0;
    for (int i = 0; i < k; ++i) {
      const auto& m = masks.hard[size_t(i)].values();
      size_t zeros = 0;
      for (float v : m) zeros += v == 0.0f ? 1 : 0;
      ls.expert_sparsity.push_back(double(zeros) / double(numel));
      zeros_all_experts += zeros;
    }
    ls.layer_sparsity = double(zeros_all_experts) / double(ls.maskable);
    ls.kept = ls.maskable - zeros_all_experts;

    size_t union_zeros = 0;
    for (size_t p = 0; p < numel; ++p) {
      bool all_zero = true;
      for (int i = 0; i < k && all_zero; ++i) {
        all_zero = masks.hard[size_t(i)].values()[p] == 0.0f;
      }
      union_zeros += all_zero ? 1 : 0;
    }
    ls.kernel_sparsity = double(union_zeros) / double(numel);

    kept_total += ls.kept;
    maskable_total += ls.maskable;
    report.layers.push_back(std::move(ls));
  }

  report.global_density =
      maskable_total == 0 ? 1.0 : double(kept_total) / double(maskable_total);
  return report;
}

std::string SparsityReport::to_text() const {
  std::ostringstream out;
  for (const auto& ls : layers) {
    out << ls.layer << ".layer_sparsity=" << fmt_double(ls.layer_sparsity) << "\n";
    out << ls.layer << ".kernel_sparsity=" << fmt_double(ls.kernel_sparsity) << "\n";
    for (size_t i = 0; i < ls.expert_sparsity.size(); ++i) {
      out << ls.layer << ".expert" << i << ".sparsity=" << fmt_double(ls.expert_sparsity[i])
          << "\n";
    }
    out << ls.layer << ".maskable=" << ls.maskable << "\n";
    out << ls.layer << ".kept=" << ls.kept << "\n";
  }
  out << "global_density=" << fmt_double(global_density) << "\n";
  return out.str();
}

std::string SparsityReport::to_csv() const {
  std::ostringstream out;
  out << "layer,layer_sparsity,kernel_sparsity,min_expert_sparsity,maskable,kept\n";
  for (const auto& ls : layers) {
    double min_expert = 1.0;
    for (double s : ls.expert_sparsity) min_expert = std::min(min_expert, s);
    if (ls.expert_sparsity.empty()) min_expert = 0.0;
    out << ls.layer << "," << fmt_double(ls.layer_sparsity) << ","
        << fmt_double(ls.kernel_sparsity) << "," << fmt_double(min_expert) << ","
        << ls.maskable << "," << ls.kept << "\n";
  }
  return out.str();
}

// ---- cost accounting -------------------------------------------------------------

CostReport count_cost(const CostModel& model) {
  CostReport report;
  report.model = model.name;
  report.input_c = model.input_c;
  report.input_h = model.input_h;
  report.input_w = model.input_w;

  for (const CostEntry& e : model.entries) {
    LayerCost lc;
    lc.name = e.name;
    switch (e.kind) {
      case CostEntry::Kind::kConv: {
        long long weight = e.out_c * e.in_c_per_group * e.k_h * e.k_w;
        lc.params = weight + (e.bias ? e.out_c : 0);
        lc.macs_dense = weight * e.out_h * e.out_w;
        lc.macs_sparse = lc.macs_dense;
        break;
      }
      case CostEntry::Kind::kBatchNorm: {
        lc.params = 2 * e.channels;
        break;
      }
      case CostEntry::Kind::kLinear: {
        lc.params = e.in_features * e.out_features + (e.bias ? e.out_features : 0);
        lc.macs_dense = e.in_features * e.out_features;
        lc.macs_sparse = lc.macs_dense;
        break;
      }
      case CostEntry::Kind::kDynamic: {
        long long positions = e.out_c * e.in_c_per_group * e.k_h * e.k_w;
        long long attn_params = e.attn_in_c * e.attn_hidden + e.attn_hidden * e.num_experts;
        lc.params = e.num_experts * positions + (e.bias ? e.num_experts * e.out_c : 0) +
                    attn_params + 1;  // +1: the layer threshold
        long long attn_macs = e.attn_in_c * e.attn_in_h * e.attn_in_w +
                              e.attn_in_c * e.attn_hidden + e.attn_hidden * e.num_experts +
                              2 * e.num_experts;
        long long conv_dense = positions * e.out_h * e.out_w;
        long long agg_dense = e.num_experts * positions + (e.bias ? e.num_experts * e.out_c : 0);
        lc.macs_dense = conv_dense + attn_macs + agg_dense;

        long long kept = llround(double(positions) * e.kernel_density);
        long long conv_sparse = llround(double(conv_dense) * e.kernel_density);
        long long agg_sparse = e.num_experts * kept + (e.bias ? e.num_experts * e.out_c : 0);
        lc.macs_sparse = conv_sparse + attn_macs + agg_sparse;
        break;
      }
    }
    report.params_total += lc.params;
    if (!e.classifier) report.params_backbone += lc.params;
    report.macs_dense += lc.macs_dense;
    report.macs_sparse += lc.macs_sparse;
    report.layers.push_back(std::move(lc));
  }
  return report;
}

std::string CostReport::to_text() const {
  std::ostringstream out;
  out << "model=" << model << "\n";
  out << "input=" << input_c << "x" << input_h << "x" << input_w << "\n";
  out << "params_total=" << params_total << "\n";
  out << "params_backbone=" << params_backbone << "\n";
  out << "macs_dense=" << macs_dense << "\n";
  out << "macs_sparse=" << macs_sparse << "\n";
  return out.str();
}

std::string CostReport::to_csv() const {
  std::ostringstream out;
  out << "layer,params,macs_dense,macs_sparse\n";
  for (const auto& lc : layers) {
    out << lc.name << "," << lc.params << "," << lc.macs_dense << "," << lc.macs_sparse
        << "\n";
  }
  return out.str();
}

CostModel cost_model_from(Model& model, int input_c, int input_h, int input_w) {
  NoGradGuard guard;
  CostModel cm;
  cm.name = "live-model";
  cm.input_c = input_c;
  cm.input_h = input_h;
  cm.input_w = input_w;

  int c = input_c, h = input_h, w = input_w;
  bool pooled = false;
  for (const auto& layer : model.layers()) {
    if (auto* conv = dynamic_cast<StaticConv2d*>(layer.get())) {
      const auto& cfg = conv->config();
      auto geom = make_conv2d_geom(1, c, h, w, cfg.out_channels, cfg.kernel_h, cfg.kernel_w,
                                   cfg.stride, cfg.padding, cfg.groups);
      CostEntry e;
      e.kind = CostEntry::Kind::kConv;
      e.name = conv->name();
      e.out_c = cfg.out_channels;
      e.in_c_per_group = cfg.in_channels / cfg.groups;
      e.k_h = cfg.kernel_h;
      e.k_w = cfg.kernel_w;
      e.out_h = geom.out_h;
      e.out_w = geom.out_w;
      e.bias = cfg.bias;
      cm.entries.push_back(e);
      c = cfg.out_channels;
      h = geom.out_h;
      w = geom.out_w;
      continue;
    }
    if (auto* sd = dynamic_cast<SDConv2d*>(layer.get())) {
      const auto& cfg = sd->config();
      auto geom = make_conv2d_geom(1, c, h, w, cfg.out_channels, cfg.kernel_h, cfg.kernel_w,
                                   cfg.stride, cfg.padding, cfg.groups);
      CostEntry e;
      e.name = sd->name();
      e.out_c = cfg.out_channels;
      e.in_c_per_group = cfg.in_channels / cfg.groups;
      e.k_h = cfg.kernel_h;
      e.k_w = cfg.kernel_w;
      e.out_h = geom.out_h;
      e.out_w = geom.out_w;
      if (cfg.mode == MaskMode::kStatic) {
        e.kind = CostEntry::Kind::kConv;
        e.bias = true;  // expert 0 carries its bias
      } else {
        e.kind = CostEntry::Kind::kDynamic;
        e.bias = true;
        e.num_experts = cfg.num_experts;
        e.attn_in_c = cfg.in_channels;
        e.attn_in_h = h;
        e.attn_in_w = w;
        e.attn_hidden = cfg.in_channels / cfg.reduce_ratio;

        LayerMasks masks = sd->build_masks();
        int row_len = int((cfg.in_channels / cfg.groups) * cfg.kernel_h * cfg.kernel_w);
        auto support = union_support(masks, cfg.out_channels, row_len);
        long long kept = 0;
        for (const auto& rows : support) kept += (long long)(rows.size());
        long long positions = (long long)(cfg.out_channels) * row_len;
        e.kernel_density = positions == 0 ? 1.0 : double(kept) / double(positions);
      }
      cm.entries.push_back(e);
      c = cfg.out_channels;
      h = geom.out_h;
      w = geom.out_w;
      continue;
    }
    if (dynamic_cast<ReLULayer*>(layer.get())) continue;
    if (dynamic_cast<GlobalAvgPoolLayer*>(layer.get())) {
      pooled = true;
      continue;
    }
    if (auto* fc = dynamic_cast<DenseLayer*>(layer.get())) {
      CostEntry e;
      e.kind = CostEntry::Kind::kLinear;
      e.name = fc->name();
      e.in_features = pooled ? c : c * h * w;
      // out_features is recoverable from the weight parameter
      for (Parameter* p : fc->parameters()) {
        if (p->local_name == "weight") e.out_features = p->value.shape()[1];
      }
      e.bias = true;
      e.classifier = true;
      cm.entries.push_back(e);
      continue;
    }
    throw AnalysisError("cannot cost layer kind of '" + layer->name() + "'");
  }
  return cm;
}

// ---- sparse execution ----------------------------------------------------------------

SparseForwardResult sparse_forward(Model& model, const Tensor& x, float attn_temperature) {
  NoGradGuard guard;
  SparseForwardResult result;
  Tensor cur = x;
  ForwardCtx ctx;
  ctx.attn_temperature = attn_temperature;

  for (const auto& layer : model.layers()) {
    auto* sd = dynamic_cast<SDConv2d*>(layer.get());
    if (sd == nullptr || sd->config().mode == MaskMode::kStatic) {
      // Dense execution for everything that has no aggregated kernel.
      if (auto* conv = dynamic_cast<StaticConv2d*>(layer.get())) {
        const auto& cfg = conv->config();
        auto geom = make_conv2d_geom(cur.shape()[0], cur.shape()[1], cur.shape()[2],
                                     cur.shape()[3], cfg.out_channels, cfg.kernel_h,
                                     cfg.kernel_w, cfg.stride, cfg.padding, cfg.groups);
        long long macs = (long long)(geom.batch) * cfg.out_channels *
                         (cfg.in_channels / cfg.groups) * cfg.kernel_h * cfg.kernel_w *
                         geom.out_h * geom.out_w;
        result.macs_dense += macs;
        result.macs_sparse += macs;
      } else if (sd != nullptr) {
        const auto& cfg = sd->config();
        auto geom = make_conv2d_geom(cur.shape()[0], cur.shape()[1], cur.shape()[2],
                                     cur.shape()[3], cfg.out_channels, cfg.kernel_h,
                                     cfg.kernel_w, cfg.stride, cfg.padding, cfg.groups);
        long long macs = (long long)(geom.batch) * cfg.out_channels *
                         (cfg.in_channels / cfg.groups) * cfg.kernel_h * cfg.kernel_w *
                         geom.out_h * geom.out_w;
        result.macs_dense += macs;
        result.macs_sparse += macs;
      } else if (auto* fc = dynamic_cast<DenseLayer*>(layer.get())) {
        long long in_f = cur.shape()[1];
        long long out_f = 0;
        for (Parameter* p : fc->parameters()) {
          if (p->local_name == "weight") out_f = p->value.shape()[1];
        }
        long long macs = (long long)(cur.shape()[0]) * in_f * out_f;
        result.macs_dense += macs;
        result.macs_sparse += macs;
      }
      cur = layer->forward(cur, ctx);
      continue;
    }

    // Sparse dynamic convolution: index-list execution over the union support.
    const auto& cfg = sd->config();
    if (cur.shape().size() != 4 || cur.shape()[1] != cfg.in_channels) {
      throw DimensionError("sparse_forward: layer '" + sd->name() + "' expects [N," +
                           std::to_string(cfg.in_channels) + ",H,W]");
    }
    const int n = cur.shape()[0], in_h = cur.shape()[2], in_w = cur.shape()[3];
    const int k = cfg.num_experts;
    auto geom = make_conv2d_geom(1, cfg.in_channels, in_h, in_w, cfg.out_channels,
                                 cfg.kernel_h, cfg.kernel_w, cfg.stride, cfg.padding,
                                 cfg.groups);
    const int row_len = (cfg.in_channels / cfg.groups) * cfg.kernel_h * cfg.kernel_w;
    const int in_c_per_group = cfg.in_channels / cfg.groups;
    const int out_c_per_group = cfg.out_channels / cfg.groups;

    Tensor pi = sd->attention_weights(cur, attn_temperature);
    LayerMasks masks = sd->build_masks();
    auto support = union_support(masks, cfg.out_channels, row_len);
    long long kept = 0;
    for (const auto& rows : support) kept += (long long)(rows.size());
    long long positions = (long long)(cfg.out_channels) * row_len;

    SparseLayerMacs lm;
    lm.layer = sd->name();
    lm.conv_dense = (long long)(n) * positions * geom.out_h * geom.out_w;
    lm.conv_sparse = (long long)(n) * kept * geom.out_h * geom.out_w;
    long long attn_macs = (long long)(cfg.in_channels) * in_h * in_w +
                          (long long)(cfg.in_channels) * (cfg.in_channels / cfg.reduce_ratio) +
                          (long long)(cfg.in_channels / cfg.reduce_ratio) * k + 2LL * k;
    lm.overhead = (long long)(n) * (attn_macs + (long long)(k) * kept +
                                    (long long)(k) * cfg.out_channels);
    long long overhead_dense = (long long)(n) * (attn_macs + (long long)(k) * positions +
                                                 (long long)(k) * cfg.out_channels);
    result.macs_dense += lm.conv_dense + overhead_dense;
    result.macs_sparse += lm.conv_sparse + lm.overhead;

    // decompose each support row index into (ci, ky, kx) once
    std::vector<float> w_row(size_t(row_len), 0.0f);
    std::vector<float> b_agg(size_t(cfg.out_channels), 0.0f);
    size_t in_plane = size_t(cfg.in_channels) * in_h * in_w;
    size_t out_plane = size_t(cfg.out_channels) * geom.out_h * geom.out_w;
    std::vector<float> y(size_t(n) * out_plane);

    for (int s = 0; s < n; ++s) {
      // aggregate bias: k MACs per output channel
      std::fill(b_agg.begin(), b_agg.end(), 0.0f);
      for (int i = 0; i < k; ++i) {
        float p = pi.values()[size_t(s) * k + i];
        const auto& b = sd->expert_bias(i).value.values();
        for (int co = 0; co < cfg.out_channels; ++co) b_agg[size_t(co)] += p * b[size_t(co)];
      }
      const float* xin = cur.values().data() + size_t(s) * in_plane;
      float* yout = y.data() + size_t(s) * out_plane;

      for (int co = 0; co < cfg.out_channels; ++co) {
        // aggregate only the support positions of this row
        const auto& rows = support[size_t(co)];
        for (int r : rows) {
          size_t p = size_t(co) * row_len + r;
          double acc = 0.0;
          for (int i = 0; i < k; ++i) {
            float pv = pi.values()[size_t(s) * k + i];
            acc += double(pv) * double(masks.hard[size_t(i)].values()[p] *
                                       sd->expert(i).value.values()[p]);
          }
          w_row[size_t(r)] = static_cast<float>(acc);
        }
        int group = co / out_c_per_group;
        int ci_base = group * in_c_per_group;
        for (int oy = 0; oy < geom.out_h; ++oy) {
          for (int ox = 0; ox < geom.out_w; ++ox) {
            float acc = b_agg[size_t(co)];
            for (int r : rows) {
              int ci = r / (cfg.kernel_h * cfg.kernel_w);
              int rem = r % (cfg.kernel_h * cfg.kernel_w);
              int ky = rem / cfg.kernel_w;
              int kx = rem % cfg.kernel_w;
              int iy = oy * cfg.stride - cfg.padding + ky;
              int ix = ox * cfg.stride - cfg.padding + kx;
              if (iy < 0 || iy >= in_h || ix < 0 || ix >= in_w) continue;
              acc += w_row[size_t(r)] *
                     xin[(size_t(ci_base) + ci) * in_h * in_w + size_t(iy) * in_w + ix];
            }
            yout[(size_t(co) * geom.out_h + oy) * geom.out_w + ox] = acc;
          }
        }
      }
    }
    result.layers.push_back(std::move(lm));
    cur = Tensor::from_values({n, cfg.out_channels, geom.out_h, geom.out_w}, y);
  }

  result.output = cur;
  return result;
}

}  // namespace sdconv
