#include "sdconv/experiments.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>

#include "sdconv/analyzer.hpp"
#include "sdconv/error.hpp"

namespace sdconv {
namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(9) << v;
  return out.str();
}

/// Shortest decimal that parses back to exactly `v` — keeps float-valued
/// report columns free of representation noise ("0.05", not "0.0500000007").
std::string fmt_float_shortest(float v) {
  for (int prec = 1; prec <= 9; ++prec) {
    std::ostringstream out;
    out << std::setprecision(prec) << double(v);
    if (std::stof(out.str()) == v) return out.str();
  }
  return fmt(double(v));
}

/// Dynamic layers in model order, static-mode ones excluded.
std::vector<SDConv2d*> dynamic_layers(Model& model) {
  std::vector<SDConv2d*> out;
  for (SDConv2d* layer : model.sdconv_layers()) {
    if (layer->config().mode != MaskMode::kStatic) out.push_back(layer);
  }
  return out;
}

/// Input geometry of the datasets the trainable models accept.
void dataset_geometry(const std::string& id, int& c, int& h, int& w) {
  if (id == "mnist") {
    c = 1; h = 28; w = 28;
    return;
  }
  if (id == "cifar10") {
    c = 3; h = 32; w = 32;
    return;
  }
  throw ConfigError("key 'dataset': unknown dataset '" + id + "'");
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open output file: " + path);
  out << text;
}

}  // namespace

// ---- one-shot magnitude pruning --------------------------------------------------

void prune_pretrained(Model& model, float fraction) {
  if (!(fraction >= 0.0f && fraction < 1.0f)) {
    throw ContractError("prune fraction must be in [0, 1)");
  }
  if (fraction == 0.0f) return;  // identity: keep whatever masking the model has

  NoGradGuard guard;
  for (SDConv2d* layer : dynamic_layers(model)) {
    const int k = layer->config().num_experts;
    const size_t per_expert = size_t(layer->expert(0).value.size());
    const size_t total = per_expert * size_t(k);

    // Magnitudes over the concatenated expert kernels, with the flat index as
    // tiebreaker so the cut is a total order.
    std::vector<std::pair<float, size_t>> order;
    order.reserve(total);
    for (int i = 0; i < k; ++i) {
      const std::vector<float>& w = layer->expert(i).value.values();
      for (size_t p = 0; p < per_expert; ++p) {
        order.emplace_back(std::fabs(w[p]), size_t(i) * per_expert + p);
      }
    }
    std::sort(order.begin(), order.end());

    const size_t cut = size_t(std::llround(double(fraction) * double(total)));
    std::vector<Tensor> masks;
    masks.reserve(size_t(k));
    for (int i = 0; i < k; ++i) {
      masks.push_back(Tensor::full(layer->expert(i).value.shape(), 1.0f));
    }
    for (size_t r = 0; r < cut; ++r) {
      const size_t flat = order[r].second;
      masks[flat / per_expert].mutable_values()[flat % per_expert] = 0.0f;
    }
    layer->set_fixed_masks(std::move(masks));
  }
}

// ---- aggregated-kernel statistics -------------------------------------------------

namespace {

/// Welford accumulator: order-independent within rounding, single pass.
struct Welford {
  int64_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double v) {
    ++count;
    double delta = v - mean;
    mean += delta / double(count);
    m2 += delta * (v - mean);
  }
  double variance() const { return count > 0 ? m2 / double(count) : 0.0; }
};

}  // namespace

std::string KernelStats::to_csv() const {
  std::string out = "layer,mean,variance,count\n";
  for (const LayerKernelStats& row : layers) {
    out += row.layer + "," + fmt(row.mean) + "," + fmt(row.variance) + "," +
           std::to_string(row.count) + "\n";
  }
  return out;
}

KernelStats KernelStats::scaled_for_plot() const {
  KernelStats out = *this;
  auto scale_curve = [&](auto get, auto set) {
    double lo = 0.0, hi = 0.0;
    for (size_t i = 0; i < out.layers.size(); ++i) {
      double v = get(out.layers[i]);
      if (i == 0) { lo = hi = v; continue; }
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    for (LayerKernelStats& row : out.layers) {
      set(row, hi > lo ? (get(row) - lo) / (hi - lo) : 0.0);
    }
  };
  scale_curve([](const LayerKernelStats& r) { return r.mean; },
              [](LayerKernelStats& r, double v) { r.mean = v; });
  scale_curve([](const LayerKernelStats& r) { return r.variance; },
              [](LayerKernelStats& r, double v) { r.variance = v; });
  return out;
}

KernelStats kernel_statistics(Model& model, const Dataset& data, int batch_size,
                              int64_t limit) {
  if (batch_size < 1) throw ContractError("kernel statistics batch size must be >= 1");
  int64_t n = limit > 0 ? std::min(limit, data.count) : data.count;
  if (n < 1) throw ContractError("kernel statistics need at least one sample");

  NoGradGuard guard;

  // The masked experts are input-independent; flatten them once per layer.
  std::vector<SDConv2d*> targets = dynamic_layers(model);
  if (targets.empty()) {
    throw ContractError("kernel statistics need at least one dynamic layer");
  }
  std::vector<std::vector<std::vector<float>>> masked(targets.size());
  for (size_t t = 0; t < targets.size(); ++t) {
    SDConv2d* layer = targets[t];
    LayerMasks lm = layer->build_masks();
    const int k = layer->config().num_experts;
    for (int i = 0; i < k; ++i) {
      const std::vector<float>& m = lm.hard[size_t(i)].values();
      const std::vector<float>& w = layer->expert(i).value.values();
      std::vector<float> mw(w.size(), 0.0f);
      for (size_t p = 0; p < w.size(); ++p) mw[p] = m[p] * w[p];
      masked[t].push_back(std::move(mw));
    }
  }

  std::vector<Welford> acc(targets.size());
  std::vector<int64_t> indices;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t count = std::min<int64_t>(batch_size, n - start);
    indices.clear();
    for (int64_t i = 0; i < count; ++i) indices.push_back(start + i);
    Tensor x = data.gather(indices);

    ForwardCtx ctx;  // inference: attention temperature 1
    size_t t = 0;
    for (const auto& layer_ptr : model.layers()) {
      auto* sd = dynamic_cast<SDConv2d*>(layer_ptr.get());
      if (sd != nullptr && sd->config().mode != MaskMode::kStatic) {
        Tensor pi = sd->attention_weights(x, ctx.attn_temperature);  // [N, k]
        const std::vector<float>& pv = pi.values();
        const int k = sd->config().num_experts;
        const size_t numel = masked[t][0].size();
        for (int64_t row = 0; row < count; ++row) {
          const float* pr = pv.data() + size_t(row) * size_t(k);
          for (size_t p = 0; p < numel; ++p) {
            double v = 0.0;
            for (int i = 0; i < k; ++i) v += double(pr[i]) * double(masked[t][size_t(i)][p]);
            acc[t].add(v);
          }
        }
        ++t;
      }
      x = layer_ptr->forward(x, ctx);
    }
  }

  KernelStats stats;
  for (size_t t = 0; t < targets.size(); ++t) {
    stats.layers.push_back(
        LayerKernelStats{targets[t]->name(), acc[t].mean, acc[t].variance(), acc[t].count});
  }
  return stats;
}

// ---- input-noise robustness --------------------------------------------------------

std::string RobustnessReport::to_csv() const {
  std::string out = "sigma,accuracy\n";
  for (const RobustnessPoint& p : points) {
    out += fmt_float_shortest(p.sigma) + "," + fmt(p.accuracy) + "\n";
  }
  return out;
}

RobustnessReport noise_robustness(Model& model, const Dataset& data,
                                  const RobustnessConfig& cfg) {
  if (cfg.sigmas.empty()) throw ContractError("noise robustness needs at least one sigma");
  for (float sigma : cfg.sigmas) {
    if (!(sigma >= 0.0f)) throw ContractError("noise sigma must be >= 0");
  }
  if (cfg.batch_size < 1) throw ContractError("noise robustness batch size must be >= 1");
  int64_t n = cfg.limit > 0 ? std::min(cfg.limit, data.count) : data.count;
  if (n < 1) throw ContractError("noise robustness needs at least one sample");

  NoGradGuard guard;
  Rng rng(cfg.seed);
  RobustnessReport report;
  std::vector<int64_t> indices;

  for (float sigma : cfg.sigmas) {
    // Stream keyed by the sigma bits: a given sigma sees the same noise no
    // matter where it sits in the list.
    RngStream stream = rng.stream("noise", uint64_t(std::bit_cast<uint32_t>(sigma)));
    int64_t correct = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      int64_t count = std::min<int64_t>(cfg.batch_size, n - start);
      indices.clear();
      for (int64_t i = 0; i < count; ++i) indices.push_back(start + i);
      Tensor x = with_gaussian_noise(data.gather(indices), sigma, stream);
      ForwardCtx ctx;
      Tensor logits = model.forward(x, ctx);
      const int classes = logits.shape()[1];
      for (int64_t row = 0; row < count; ++row) {
        const float* p = logits.values().data() + size_t(row) * size_t(classes);
        int best = 0;
        for (int c = 1; c < classes; ++c)
          if (p[c] > p[best]) best = c;  // strict: ties keep the lowest index
        if (best == data.labels[size_t(start + row)]) ++correct;
      }
    }
    report.points.push_back(RobustnessPoint{sigma, double(correct) / double(n)});
  }
  return report;
}

// ---- sparsity-ratio sweep -----------------------------------------------------------

std::string SweepReport::to_csv() const {
  std::string out = "s,final_density,accuracy\n";
  for (const SweepPoint& p : points) {
    out += fmt_float_shortest(p.s) + "," + fmt(p.final_density) + "," + fmt(p.accuracy) + "\n";
  }
  return out;
}

SweepReport sparsity_sweep(const TrainConfig& base, const std::vector<float>& s_list) {
  for (float s : s_list) {
    if (!(s >= 0.0f && s < 1.0f)) throw ContractError("sweep sparsity must be in [0, 1)");
  }

  SweepReport report;
  for (float s : s_list) {
    TrainConfig cfg = base;
    cfg.target_sparsity = s;
    if (!base.out_dir.empty()) {
      cfg.out_dir = (fs::path(base.out_dir) / ("s" + fmt_float_shortest(s))).string();
    }
    TrainOutput out = train(cfg);
    report.points.push_back(
        SweepPoint{s, out.result.final_density, out.result.final_accuracy});
  }

  if (!base.out_dir.empty()) {
    fs::create_directories(base.out_dir);
    report.csv_path = (fs::path(base.out_dir) / "sweep.csv").string();
    write_text_file(report.csv_path, report.to_csv());
  }
  return report;
}

// ---- masking-strategy comparison -----------------------------------------------------

namespace {

StrategyResult run_strategy(const TrainConfig& base, const std::string& mode,
                            const std::string& subdir) {
  TrainConfig cfg = base;
  cfg.mask_mode = mode;
  if (!base.out_dir.empty()) {
    cfg.out_dir = (fs::path(base.out_dir) / subdir).string();
  }
  TrainOutput out = train(cfg);

  StrategyResult result;
  result.mode = mode;
  result.accuracy = out.result.final_accuracy;

  SparsityReport rep = measure_sparsity(out.model);
  result.global_density = rep.global_density;
  for (const LayerSparsity& ls : rep.layers) {
    result.layers.push_back(StrategyLayerRow{ls.layer, ls.layer_sparsity, ls.kernel_sparsity});
  }

  int c = 0, h = 0, w = 0;
  dataset_geometry(cfg.dataset, c, h, w);
  CostReport cost = count_cost(cost_model_from(out.model, c, h, w));
  result.macs_dense = cost.macs_dense;
  result.macs_sparse = cost.macs_sparse;
  return result;
}

void append_strategy_text(std::string& out, const std::string& prefix,
                          const StrategyResult& r) {
  out += prefix + ".mode=" + r.mode + "\n";
  out += prefix + ".accuracy=" + fmt(r.accuracy) + "\n";
  out += prefix + ".global_density=" + fmt(r.global_density) + "\n";
  out += prefix + ".macs_dense=" + std::to_string(r.macs_dense) + "\n";
  out += prefix + ".macs_sparse=" + std::to_string(r.macs_sparse) + "\n";
  for (const StrategyLayerRow& row : r.layers) {
    out += prefix + ".layer." + row.layer + ".layer_sparsity=" + fmt(row.layer_sparsity) + "\n";
    out += prefix + ".layer." + row.layer + ".kernel_sparsity=" + fmt(row.kernel_sparsity) + "\n";
  }
}

}  // namespace

std::string MaskingComparison::to_text() const {
  std::string out;
  append_strategy_text(out, "different", different);
  append_strategy_text(out, "same", same);
  return out;
}

std::string MaskingComparison::to_csv() const {
  std::string out = "mode,accuracy,global_density,macs_dense,macs_sparse\n";
  for (const StrategyResult* r : {&different, &same}) {
    out += r->mode + "," + fmt(r->accuracy) + "," + fmt(r->global_density) + "," +
           std::to_string(r->macs_dense) + "," + std::to_string(r->macs_sparse) + "\n";
  }
  return out;
}

MaskingComparison masking_strategy_compare(const TrainConfig& base) {
  MaskingComparison cmp;
  cmp.different = run_strategy(base, "sparse-different-masks", "different");
  cmp.same = run_strategy(base, "sparse-same-mask", "same");
  if (!base.out_dir.empty()) {
    write_text_file((fs::path(base.out_dir) / "compare.txt").string(), cmp.to_text());
    write_text_file((fs::path(base.out_dir) / "compare.csv").string(), cmp.to_csv());
  }
  return cmp;
}

}  // namespace sdconv
