#include "sdconv/layers.hpp"

#include <cmath>
#include <cstring>
#include <set>
#include <utility>

#include "sdconv/conv_kernels.hpp"
#include "sdconv/error.hpp"

namespace sdconv {

namespace {

/// He-style normal init: std = sqrt(gain / fan_in), drawn from the named
/// stream so results do not depend on construction order elsewhere.
Tensor init_normal(Rng& rng, const std::string& stream_name, const Shape& shape,
                   double gain, int fan_in) {
  RngStream stream = rng.stream(stream_name);
  double std_dev = std::sqrt(gain / double(fan_in));
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<float>(stream.normal() * std_dev);
  Tensor t = Tensor::from_values(shape, values, true);
  return t;
}

void check_input_4d(const Tensor& x, int expect_channels, const std::string& layer) {
  if (!x.defined() || x.shape().size() != 4) {
    throw DimensionError("layer '" + layer + "' expects a rank-4 input [N,C,H,W]");
  }
  if (x.shape()[1] != expect_channels) {
    throw DimensionError("layer '" + layer + "' expects " + std::to_string(expect_channels) +
                         " input channels, got " + std::to_string(x.shape()[1]));
  }
}

}  // namespace

// ---- StaticConv2d ----------------------------------------------------------

StaticConv2d::StaticConv2d(std::string name, const StaticConvConfig& cfg, Rng& rng)
    : Layer(std::move(name)), cfg_(cfg) {
  if (cfg.in_channels <= 0 || cfg.out_channels <= 0) {
    throw ConfigError("conv layer '" + this->name() + "': channel counts must be positive");
  }
  if (cfg.groups <= 0 || cfg.in_channels % cfg.groups != 0 ||
      cfg.out_channels % cfg.groups != 0) {
    throw ConfigError("conv layer '" + this->name() + "': groups must divide both channel counts");
  }
  int fan_in = (cfg.in_channels / cfg.groups) * cfg.kernel_h * cfg.kernel_w;
  weight_ = Parameter{
      "weight",
      init_normal(rng, "init." + this->name() + ".weight",
                  {cfg.out_channels, cfg.in_channels / cfg.groups, cfg.kernel_h, cfg.kernel_w},
                  2.0, fan_in),
      false, true};
  if (cfg.bias) {
    bias_ = Parameter{"bias", Tensor::zeros({cfg.out_channels}, true), false, true};
  }
}

Tensor StaticConv2d::forward(const Tensor& x, ForwardCtx&) {
  check_input_4d(x, cfg_.in_channels, name());
  ConvSpec spec{cfg_.stride, cfg_.padding, cfg_.groups};
  return conv2d(x, weight_.value, cfg_.bias ? bias_.value : Tensor{}, spec);
}

std::vector<Parameter*> StaticConv2d::parameters() {
  std::vector<Parameter*> out{&weight_};
  if (cfg_.bias) out.push_back(&bias_);
  return out;
}

// ---- SDConv2d ---------------------------------------------------------------

MaskMode mask_mode_from_string(const std::string& text) {
  if (text == "dynamic-dense") return MaskMode::kDynamicDense;
  if (text == "sparse-different-masks") return MaskMode::kSparseDifferent;
  if (text == "sparse-same-mask") return MaskMode::kSparseSame;
  if (text == "static") return MaskMode::kStatic;
  throw ConfigError("unknown mask mode '" + text +
                    "' (expected dynamic-dense, sparse-different-masks, "
                    "sparse-same-mask, or static)");
}

std::string to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::kDynamicDense: return "dynamic-dense";
    case MaskMode::kSparseDifferent: return "sparse-different-masks";
    case MaskMode::kSparseSame: return "sparse-same-mask";
    case MaskMode::kStatic: return "static";
  }
  throw ContractError("invalid mask mode value");
}

SDConv2d::SDConv2d(std::string name, const SDConvConfig& cfg, Rng& rng)
    : Layer(std::move(name)), cfg_(cfg) {
  if (cfg.in_channels <= 0 || cfg.out_channels <= 0) {
    throw ConfigError("sdconv layer '" + this->name() + "': channel counts must be positive");
  }
  if (cfg.groups <= 0 || cfg.in_channels % cfg.groups != 0 ||
      cfg.out_channels % cfg.groups != 0) {
    throw ConfigError("sdconv layer '" + this->name() +
                      "': groups must divide both channel counts");
  }
  if (cfg.num_experts < 1) {
    throw ConfigError("sdconv layer '" + this->name() + "': need at least one expert");
  }
  if (cfg.reduce_ratio < 1 || cfg.in_channels % cfg.reduce_ratio != 0) {
    throw ConfigError("sdconv layer '" + this->name() + "': reduce ratio " +
                      std::to_string(cfg.reduce_ratio) + " must divide input channels " +
                      std::to_string(cfg.in_channels));
  }
  if (!(cfg.sharpness > 0.0f)) {
    throw ConfigError("sdconv layer '" + this->name() + "': sharpness must be positive");
  }

  int fan_in = (cfg.in_channels / cfg.groups) * cfg.kernel_h * cfg.kernel_w;
  Shape w_shape{cfg.out_channels, cfg.in_channels / cfg.groups, cfg.kernel_h, cfg.kernel_w};
  experts_.reserve(size_t(cfg.num_experts));
  biases_.reserve(size_t(cfg.num_experts));
  for (int i = 0; i < cfg.num_experts; ++i) {
    std::string idx = std::to_string(i);
    experts_.push_back(Parameter{
        "expert" + idx + ".weight",
        init_normal(rng, "init." + this->name() + ".expert" + idx, w_shape, 2.0, fan_in),
        false, true});
    biases_.push_back(Parameter{"expert" + idx + ".bias",
                                Tensor::zeros({cfg.out_channels}, true), false, true});
  }

  int hidden = cfg.in_channels / cfg.reduce_ratio;
  attn_reduce_ = Parameter{
      "attn.reduce",
      init_normal(rng, "init." + this->name() + ".attn.reduce",
                  {cfg.in_channels, hidden}, 2.0, cfg.in_channels),
      false, true};
  attn_expand_ = Parameter{
      "attn.expand",
      init_normal(rng, "init." + this->name() + ".attn.expand",
                  {hidden, cfg.num_experts}, 1.0, hidden),
      false, true};

  // S = |W| >= 0, so tau = 0 starts every mask at 1: training begins dense.
  tau_ = Parameter{"tau", Tensor::scalar(0.0f, true), true, false};
}

Tensor SDConv2d::attention_weights(const Tensor& x, float temperature) {
  if (!(temperature > 0.0f)) {
    throw ContractError("attention temperature must be positive");
  }
  Tensor pooled = global_avg_pool(x);                       // [N, Cin]
  Tensor hidden = relu(matmul(pooled, attn_reduce_.value)); // [N, Cin/r]
  Tensor logits = matmul(hidden, attn_expand_.value);       // [N, k]
  return softmax_rows(scale(logits, 1.0f / temperature));
}

LayerMasks SDConv2d::build_masks() const {
  const int k = cfg_.num_experts;
  LayerMasks out;
  out.soft.reserve(size_t(k));
  out.hard.reserve(size_t(k));

  if (!fixed_masks_.empty()) {
    for (int i = 0; i < k; ++i) {
      out.soft.push_back(fixed_masks_[size_t(i)]);
      out.hard.push_back(fixed_masks_[size_t(i)]);
    }
    return out;
  }

  if (cfg_.mode == MaskMode::kDynamicDense) {
    // Constant all-ones masks keep the dense mode on the exact same code
    // path as the sparse modes (multiplication by 1 is exact in IEEE754).
    Tensor ones = Tensor::full(experts_[0].value.shape(), 1.0f);
    for (int i = 0; i < k; ++i) {
      out.soft.push_back(ones);
      out.hard.push_back(ones);
    }
    return out;
  }

  out.thresholded = true;
  if (cfg_.mode == MaskMode::kSparseSame) {
    // Shared scores: mean over experts of |W_i|.
    Tensor acc = abs_val(experts_[0].value);
    for (int i = 1; i < k; ++i) acc = add(acc, abs_val(experts_[size_t(i)].value));
    Tensor scores = scale(acc, 1.0f / float(k));
    Tensor soft = threshold_soft_mask(scores, tau_.value, cfg_.sharpness);
    Tensor hard = ste_round(soft);
    for (int i = 0; i < k; ++i) {
      out.soft.push_back(soft);
      out.hard.push_back(hard);
    }
    out.shared = true;
    return out;
  }

  // Per-expert masks from each expert's own magnitudes.
  for (int i = 0; i < k; ++i) {
    Tensor soft =
        threshold_soft_mask(abs_val(experts_[size_t(i)].value), tau_.value, cfg_.sharpness);
    out.soft.push_back(soft);
    out.hard.push_back(ste_round(soft));
  }
  return out;
}

void SDConv2d::register_masks(ForwardCtx& ctx, const LayerMasks& masks) const {
  if (!masks.thresholded) return;
  size_t numel = experts_[0].value.size();
  if (masks.shared) {
    ctx.masks.push_back(
        MaskRecord{masks.soft[0], float(cfg_.num_experts), numel * size_t(cfg_.num_experts)});
    return;
  }
  for (const Tensor& soft : masks.soft) {
    ctx.masks.push_back(MaskRecord{soft, 1.0f, numel});
  }
}

Tensor SDConv2d::forward(const Tensor& x, ForwardCtx& ctx) {
  check_input_4d(x, cfg_.in_channels, name());
  ConvSpec spec{cfg_.stride, cfg_.padding, cfg_.groups};
  if (cfg_.mode == MaskMode::kStatic) {
    return conv2d(x, experts_[0].value, biases_[0].value, spec);
  }

  const int n = x.shape()[0];
  const int k = cfg_.num_experts;
  Tensor pi = attention_weights(x, ctx.attn_temperature);  // [N, k]

  LayerMasks masks = build_masks();
  register_masks(ctx, masks);

  std::vector<Tensor> masked;
  masked.reserve(size_t(k));
  for (int i = 0; i < k; ++i) {
    masked.push_back(mul(masks.hard[size_t(i)], experts_[size_t(i)].value));
  }
  Tensor stacked = stack_rows(masked);  // [k, P]
  Tensor agg = matmul(pi, stacked);     // [N, P]: per-sample flattened kernels

  std::vector<Tensor> bias_rows;
  bias_rows.reserve(size_t(k));
  for (int i = 0; i < k; ++i) bias_rows.push_back(biases_[size_t(i)].value);
  Tensor bias_stack = stack_rows(bias_rows);  // [k, Cout]
  Tensor bias_agg = matmul(pi, bias_stack);   // [N, Cout]

  // One grouped convolution evaluates all per-sample kernels: sample n's
  // channels form groups [n*g, (n+1)*g) of the batched input.
  auto geom = make_conv2d_geom(x.shape()[0], cfg_.in_channels, x.shape()[2], x.shape()[3],
                               cfg_.out_channels, cfg_.kernel_h, cfg_.kernel_w, cfg_.stride,
                               cfg_.padding, cfg_.groups);
  Tensor w_batch = reshape(agg, {n * cfg_.out_channels, cfg_.in_channels / cfg_.groups,
                                 cfg_.kernel_h, cfg_.kernel_w});
  Tensor b_batch = reshape(bias_agg, {n * cfg_.out_channels});
  Tensor x_batch = reshape(x, {1, n * cfg_.in_channels, x.shape()[2], x.shape()[3]});
  ConvSpec batched_spec{cfg_.stride, cfg_.padding, cfg_.groups * n};
  Tensor y = conv2d(x_batch, w_batch, b_batch, batched_spec);
  return reshape(y, {n, cfg_.out_channels, geom.out_h, geom.out_w});
}

Tensor SDConv2d::forward_loop_reference(const Tensor& x, ForwardCtx& ctx) {
  check_input_4d(x, cfg_.in_channels, name());
  ConvSpec spec{cfg_.stride, cfg_.padding, cfg_.groups};
  if (cfg_.mode == MaskMode::kStatic) {
    NoGradGuard guard;
    return conv2d(x, experts_[0].value, biases_[0].value, spec);
  }

  NoGradGuard guard;
  const int n = x.shape()[0];
  const int k = cfg_.num_experts;
  Tensor pi = attention_weights(x, ctx.attn_temperature);
  LayerMasks masks = build_masks();

  auto geom = make_conv2d_geom(1, cfg_.in_channels, x.shape()[2], x.shape()[3],
                               cfg_.out_channels, cfg_.kernel_h, cfg_.kernel_w, cfg_.stride,
                               cfg_.padding, cfg_.groups);
  size_t w_numel = experts_[0].value.size();
  size_t in_plane = size_t(cfg_.in_channels) * x.shape()[2] * x.shape()[3];
  size_t out_plane = size_t(cfg_.out_channels) * geom.out_h * geom.out_w;
  std::vector<float> y(size_t(n) * out_plane);
  std::vector<float> w_agg(w_numel);
  std::vector<float> b_agg(size_t(cfg_.out_channels));

  for (int s = 0; s < n; ++s) {
    std::fill(w_agg.begin(), w_agg.end(), 0.0f);
    std::fill(b_agg.begin(), b_agg.end(), 0.0f);
    for (int i = 0; i < k; ++i) {
      float p = pi.values()[size_t(s) * k + i];
      const auto& w = experts_[size_t(i)].value.values();
      const auto& m = masks.hard[size_t(i)].values();
      for (size_t j = 0; j < w_numel; ++j) w_agg[j] += p * (m[j] * w[j]);
      const auto& b = biases_[size_t(i)].value.values();
      for (int c = 0; c < cfg_.out_channels; ++c) b_agg[size_t(c)] += p * b[size_t(c)];
    }
    conv2d_forward(x.values().data() + size_t(s) * in_plane, w_agg.data(), b_agg.data(),
                   y.data() + size_t(s) * out_plane, geom);
  }
  return Tensor::from_values({n, cfg_.out_channels, geom.out_h, geom.out_w}, y);
}

std::vector<Parameter*> SDConv2d::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : experts_) out.push_back(&p);
  for (auto& p : biases_) out.push_back(&p);
  out.push_back(&attn_reduce_);
  out.push_back(&attn_expand_);
  out.push_back(&tau_);
  return out;
}

void SDConv2d::set_fixed_masks(std::vector<Tensor> masks) {
  if (masks.empty()) {
    fixed_masks_.clear();
    return;
  }
  if (int(masks.size()) != cfg_.num_experts) {
    throw ContractError("fixed masks: expected " + std::to_string(cfg_.num_experts) +
                        " tensors, got " + std::to_string(masks.size()));
  }
  for (const Tensor& m : masks) {
    if (!m.defined() || m.shape() != experts_[0].value.shape()) {
      throw DimensionError("fixed masks must match the expert weight shape " +
                           shape_to_string(experts_[0].value.shape()));
    }
  }
  fixed_masks_ = std::move(masks);
}

// ---- simple layers ----------------------------------------------------------

Tensor ReLULayer::forward(const Tensor& x, ForwardCtx&) { return relu(x); }

Tensor GlobalAvgPoolLayer::forward(const Tensor& x, ForwardCtx&) {
  return global_avg_pool(x);
}

DenseLayer::DenseLayer(std::string name, int in_features, int out_features, Rng& rng)
    : Layer(std::move(name)), in_features_(in_features), out_features_(out_features) {
  if (in_features <= 0 || out_features <= 0) {
    throw ConfigError("dense layer '" + this->name() + "': feature counts must be positive");
  }
  weight_ = Parameter{"weight",
                      init_normal(rng, "init." + this->name() + ".weight",
                                  {in_features, out_features}, 1.0, in_features),
                      false, true};
  bias_ = Parameter{"bias", Tensor::zeros({out_features}, true), false, true};
}

Tensor DenseLayer::forward(const Tensor& x, ForwardCtx&) {
  if (!x.defined() || x.shape().size() != 2 || x.shape()[1] != in_features_) {
    throw DimensionError("dense layer '" + name() + "' expects input [N," +
                         std::to_string(in_features_) + "]");
  }
  return add_row_bias(matmul(x, weight_.value), bias_.value);
}

std::vector<Parameter*> DenseLayer::parameters() { return {&weight_, &bias_}; }

// ---- Model -------------------------------------------------------------------

Layer* Model::add(std::unique_ptr<Layer> layer) {
  if (!layer) throw ContractError("cannot add a null layer");
  for (const auto& existing : layers_) {
    if (existing->name() == layer->name()) {
      throw ConfigError("duplicate layer name '" + layer->name() + "'");
    }
  }
  layers_.push_back(std::move(layer));
  return layers_.back().get();
}

Tensor Model::forward(const Tensor& x, ForwardCtx& ctx) {
  if (layers_.empty()) throw ContractError("model has no layers");
  Tensor out = x;
  for (auto& layer : layers_) out = layer->forward(out, ctx);
  return out;
}

std::vector<NamedParameter> Model::parameters() {
  std::vector<NamedParameter> out;
  for (auto& layer : layers_) {
    for (Parameter* p : layer->parameters()) {
      out.push_back(NamedParameter{layer->name() + "." + p->local_name, p});
    }
  }
  return out;
}

Layer* Model::find(const std::string& name) {
  for (auto& layer : layers_) {
    if (layer->name() == name) return layer.get();
  }
  return nullptr;
}

std::vector<SDConv2d*> Model::sdconv_layers() {
  std::vector<SDConv2d*> out;
  for (auto& layer : layers_) {
    if (auto* sd = dynamic_cast<SDConv2d*>(layer.get())) out.push_back(sd);
  }
  return out;
}

}  // namespace sdconv
