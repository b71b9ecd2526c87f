#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "sdconv/analyzer.hpp"
#include "sdconv/error.hpp"
#include "sdconv/layers.hpp"
#include "sdconv/rng.hpp"
#include "sdconv/zoo.hpp"
#include "support/oracles.hpp"

using namespace sdconv;

namespace {

std::unique_ptr<SDConv2d> small_sd(Rng& rng, const std::string& name, MaskMode mode,
                                   int experts = 2) {
  SDConvConfig cfg;
  cfg.in_channels = 2;
  cfg.out_channels = 2;
  cfg.kernel_h = cfg.kernel_w = 2;
  cfg.num_experts = experts;
  cfg.reduce_ratio = 1;
  cfg.mode = mode;
  return std::make_unique<SDConv2d>(name, cfg, rng);
}

bool within(double value, double target, double rel) {
  return std::fabs(value - target) <= rel * target;
}

Tensor random_input(RngStream& rng, int n, int c, int h, int w) {
  std::vector<float> v(size_t(n) * c * h * w);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor::from_values({n, c, h, w}, v);
}

float median_abs(const std::vector<float>& v) {
  std::vector<float> mags;
  for (float x : v) mags.push_back(std::fabs(x));
  std::sort(mags.begin(), mags.end());
  return mags[mags.size() / 2];
}

}  // namespace

TEST_CASE("sparsity measurement: all-ones masks give zero sparsity") {
  Rng rng(301);
  Model model;
  auto layer = small_sd(rng, "sd", MaskMode::kSparseDifferent);
  layer->mutable_threshold().value.mutable_values()[0] = -10.0f;
  model.add(std::move(layer));

  SparsityReport report = measure_sparsity(model);
  REQUIRE(report.layers.size() == 1);
  CHECK(report.layers[0].layer_sparsity == 0.0);
  CHECK(report.layers[0].kernel_sparsity == 0.0);
  CHECK(report.global_density == 1.0);
}

TEST_CASE("sparsity measurement: complementary masks have zero kernel sparsity") {
  Rng rng(302);
  Model model;
  auto layer = small_sd(rng, "sd", MaskMode::kSparseDifferent);
  // 16 positions per expert: expert0 keeps the first half, expert1 the rest
  std::vector<float> m0(16, 0.0f), m1(16, 0.0f);
  for (int i = 0; i < 8; ++i) m0[size_t(i)] = 1.0f;
  for (int i = 8; i < 16; ++i) m1[size_t(i)] = 1.0f;
  layer->set_fixed_masks({Tensor::from_values({2, 2, 2, 2}, m0),
                          Tensor::from_values({2, 2, 2, 2}, m1)});
  model.add(std::move(layer));

  SparsityReport report = measure_sparsity(model);
  REQUIRE(report.layers.size() == 1);
  CHECK(report.layers[0].expert_sparsity[0] == 0.5);
  CHECK(report.layers[0].expert_sparsity[1] == 0.5);
  CHECK(report.layers[0].layer_sparsity == 0.5);
  CHECK(report.layers[0].kernel_sparsity == 0.0);  // supports are disjoint
  CHECK(report.global_density == 0.5);
}

TEST_CASE("sparsity measurement: identical masks make kernel equal layer sparsity") {
  Rng rng(303);
  Model model;
  auto layer = small_sd(rng, "sd", MaskMode::kSparseSame, 3);
  float tau = median_abs(layer->expert(0).value.values());
  layer->mutable_threshold().value.mutable_values()[0] = tau;
  model.add(std::move(layer));

  SparsityReport report = measure_sparsity(model);
  REQUIRE(report.layers.size() == 1);
  const auto& ls = report.layers[0];
  CHECK(ls.kernel_sparsity == ls.layer_sparsity);  // exact, not approximate
  CHECK(ls.layer_sparsity > 0.0);
  CHECK(ls.layer_sparsity < 1.0);
}

TEST_CASE("sparsity measurement: overlap bound on random masks") {
  Rng rng(304);
  for (int trial = 0; trial < 20; ++trial) {
    RngStream stream = rng.stream("overlap", trial);
    Model model;
    auto layer = small_sd(rng, "sd" + std::to_string(trial), MaskMode::kSparseDifferent, 3);
    std::vector<Tensor> masks;
    for (int e = 0; e < 3; ++e) {
      std::vector<float> m(16);
      for (auto& v : m) v = stream.uniform() < 0.5 ? 1.0f : 0.0f;
      masks.push_back(Tensor::from_values({2, 2, 2, 2}, m));
    }
    layer->set_fixed_masks(masks);
    model.add(std::move(layer));

    SparsityReport report = measure_sparsity(model);
    const auto& ls = report.layers[0];
    double min_expert = 1.0;
    for (double s : ls.expert_sparsity) min_expert = std::min(min_expert, s);
    CHECK(ls.kernel_sparsity <= min_expert + 1e-12);
  }
}

TEST_CASE("static-mode and plain conv layers are excluded from mask accounting") {
  Rng rng(305);
  Model model;
  StaticConvConfig stem;
  stem.in_channels = 2;
  stem.out_channels = 2;
  model.add(std::make_unique<StaticConv2d>("conv", stem, rng));
  model.add(small_sd(rng, "sd", MaskMode::kStatic));
  SparsityReport report = measure_sparsity(model);
  CHECK(report.layers.empty());
  CHECK(report.global_density == 1.0);
}

// ---- cost goldens ---------------------------------------------------------------

TEST_CASE("resnet18 cost matches published magnitudes") {
  CostReport r = count_cost(build_cost_model("resnet18", 224));
  CHECK_MESSAGE(within(double(r.params_backbone), 11.1e6, 0.02),
                "backbone params " << r.params_backbone);
  CHECK_MESSAGE(within(double(r.macs_dense), 1.81e9, 0.03), "macs " << r.macs_dense);
  // torchvision reference totals for the same construction
  CHECK(r.params_backbone == 11176512);
  CHECK(r.params_total == 11689512);
}

TEST_CASE("resnet50 cost matches published magnitudes") {
  CostReport r = count_cost(build_cost_model("resnet50", 224));
  CHECK_MESSAGE(within(double(r.params_backbone), 23.5e6, 0.02),
                "backbone params " << r.params_backbone);
  CHECK(r.params_backbone == 23508032);
  CHECK(r.params_total == 25557032);
}

TEST_CASE("mobilenetv2 x1.0 cost matches published magnitudes") {
  CostReport r = count_cost(build_cost_model("mobilenetv2-1.0", 224));
  CHECK_MESSAGE(within(double(r.params_total), 3.5e6, 0.02), "params " << r.params_total);
  CHECK_MESSAGE(within(double(r.macs_dense), 300e6, 0.03), "macs " << r.macs_dense);
  CHECK(r.params_total == 3504872);
}

TEST_CASE("width-scaled mobilenets shrink consistently") {
  long long p50 = count_cost(build_cost_model("mobilenetv2-0.5", 224)).params_total;
  long long p75 = count_cost(build_cost_model("mobilenetv2-0.75", 224)).params_total;
  long long p100 = count_cost(build_cost_model("mobilenetv2-1.0", 224)).params_total;
  CHECK(p50 < p75);
  CHECK(p75 < p100);
}

TEST_CASE("resnet10 is smaller than resnet18 and keeps the stem static") {
  CostReport r10 = count_cost(build_cost_model("dy-resnet10", 224));
  CostReport r18 = count_cost(build_cost_model("dy-resnet18", 224));
  CHECK(r10.params_total < r18.params_total);
}

TEST_CASE("dynamic variant with one expert equals the static architecture exactly") {
  ZooOptions one;
  one.num_experts = 1;
  CostReport stat = count_cost(build_cost_model("resnet18", 224));
  CostReport dyn = count_cost(build_cost_model("dy-resnet18", 224, one));
  CHECK(dyn.params_total == stat.params_total);
  CHECK(dyn.params_backbone == stat.params_backbone);
  CHECK(dyn.macs_dense == stat.macs_dense);
  CHECK(dyn.macs_sparse == stat.macs_sparse);
}

TEST_CASE("dynamic resnet18 multiplies non-stem conv parameters by k") {
  CostReport stat = count_cost(build_cost_model("resnet18", 224));
  CostReport dyn = count_cost(build_cost_model("dy-resnet18", 224));
  // static backbone 11.18M: stem 9408 + BN 9600 + other convs 11157504.
  // The faithful dynamic construction quadruples the non-stem convs and adds
  // attention parameters, so it must exceed 4x their size.
  long long non_stem = 11157504;
  CHECK(dyn.params_backbone > 4 * non_stem);
  CHECK(dyn.params_backbone < 4 * non_stem + 300000);  // stem+bn+attention margin
  CHECK(dyn.macs_dense > stat.macs_dense);
  CHECK(stat.params_backbone == 9408 + 9600 + non_stem);
}

TEST_CASE("unknown zoo id is rejected") {
  CHECK_THROWS_AS(build_cost_model("vgg16", 224), ConfigError);
  CHECK_THROWS_AS(build_cost_model("resnet18", 8), ConfigError);
}

// ---- live-model cost extraction ----------------------------------------------------

TEST_CASE("toy model cost extraction") {
  Rng rng(306);
  ToyModelConfig cfg;
  Model model = build_toy_model(cfg, rng);
  CostModel cm = cost_model_from(model, 1, 28, 28);
  REQUIRE(cm.entries.size() == 4);  // conv1, sd1, sd2, fc
  CHECK(cm.entries[0].kind == CostEntry::Kind::kConv);
  CHECK(cm.entries[1].kind == CostEntry::Kind::kDynamic);
  CHECK(cm.entries[2].kind == CostEntry::Kind::kDynamic);
  CHECK(cm.entries[3].kind == CostEntry::Kind::kLinear);

  CostReport r = count_cost(cm);
  REQUIRE(r.layers.size() == 4);
  CHECK(r.layers[0].params == 16 * 9 + 16);          // stem conv + bias
  CHECK(r.layers[1].params == 4 * 4608 + 4 * 32 + 16 * 1 + 1 * 4 + 1);
  CHECK(r.layers[2].params == 4 * 9216 + 4 * 32 + 32 * 2 + 2 * 4 + 1);
  CHECK(r.layers[3].params == 32 * 10 + 10);
  CHECK(r.layers[0].macs_dense == 16LL * 9 * 14 * 14);
  CHECK(r.params_backbone == r.params_total - r.layers[3].params);

  // masks are dense at init, so sparse equals dense
  CHECK(r.macs_sparse == r.macs_dense);
}

TEST_CASE("live extraction reads current kernel density from the masks") {
  Rng rng(307);
  Model model;
  auto layer = small_sd(rng, "sd", MaskMode::kSparseDifferent);
  // union support: expert0 keeps positions {0,1}, expert1 keeps {1,2}
  std::vector<float> m0(16, 0.0f), m1(16, 0.0f);
  m0[0] = m0[1] = 1.0f;
  m1[1] = m1[2] = 1.0f;
  layer->set_fixed_masks({Tensor::from_values({2, 2, 2, 2}, m0),
                          Tensor::from_values({2, 2, 2, 2}, m1)});
  model.add(std::move(layer));

  CostModel cm = cost_model_from(model, 2, 5, 5);
  REQUIRE(cm.entries.size() == 1);
  CHECK(cm.entries[0].kernel_density == doctest::Approx(3.0 / 16.0));
}

TEST_CASE("unknown layer kinds raise an analysis error") {
  struct Opaque : Layer {
    explicit Opaque(std::string name) : Layer(std::move(name)) {}
    Tensor forward(const Tensor& x, ForwardCtx&) override { return x; }
  };
  Rng rng(308);
  Model model;
  model.add(std::make_unique<Opaque>("mystery"));
  CHECK_THROWS_AS(cost_model_from(model, 1, 8, 8), AnalysisError);
}

// ---- sparse executor -----------------------------------------------------------------

TEST_CASE("sparse forward equals dense forward within 1e-5") {
  Rng rng(309);
  for (int trial = 0; trial < 15; ++trial) {
    ToyModelConfig cfg;
    cfg.in_channels = 1;
    cfg.mode = trial % 2 == 0 ? MaskMode::kSparseDifferent : MaskMode::kSparseSame;
    Rng model_rng(400 + uint64_t(trial));
    Model model = build_toy_model(cfg, model_rng);
    for (SDConv2d* sd : model.sdconv_layers()) {
      float tau = median_abs(sd->expert(0).value.values());
      sd->mutable_threshold().value.mutable_values()[0] = tau;
    }

    RngStream stream = rng.stream("exec-x", trial);
    Tensor x = random_input(stream, 3, 1, 12, 12);
    SparseForwardResult sparse = sparse_forward(model, x);

    NoGradGuard guard;
    ForwardCtx ctx;
    Tensor dense = model.forward(x, ctx);
    REQUIRE(sparse.output.shape() == dense.shape());
    for (int64_t i = 0; i < dense.size(); ++i) {
      double denom = std::max(1.0, std::fabs(double(dense.values()[size_t(i)])));
      REQUIRE_MESSAGE(std::fabs(double(sparse.output.values()[size_t(i)]) -
                                double(dense.values()[size_t(i)])) / denom < 1e-5,
                      "trial " << trial << " element " << i);
    }
    CHECK(sparse.macs_sparse <= sparse.macs_dense);
    CHECK(sparse.macs_sparse > 0);
  }
}

TEST_CASE("a half-empty aggregated kernel halves the recorded convolution MACs") {
  Rng rng(310);
  Model model;
  auto layer = small_sd(rng, "sd", MaskMode::kSparseDifferent);
  // union support of exactly 8 of 16 positions
  std::vector<float> m0(16, 0.0f), m1(16, 0.0f);
  for (int i = 0; i < 8; ++i) m0[size_t(i)] = 1.0f;
  for (int i = 4; i < 8; ++i) m1[size_t(i)] = 1.0f;  // subset of m0's support
  layer->set_fixed_masks({Tensor::from_values({2, 2, 2, 2}, m0),
                          Tensor::from_values({2, 2, 2, 2}, m1)});
  model.add(std::move(layer));

  RngStream stream = rng.stream("half-x");
  Tensor x = random_input(stream, 2, 2, 6, 6);
  SparseForwardResult result = sparse_forward(model, x);
  REQUIRE(result.layers.size() == 1);
  CHECK(result.layers[0].conv_sparse * 2 == result.layers[0].conv_dense);
}

TEST_CASE("fully dense masks record equal sparse and dense convolution MACs") {
  Rng rng(311);
  Model model;
  auto layer = small_sd(rng, "sd", MaskMode::kSparseDifferent);
  layer->mutable_threshold().value.mutable_values()[0] = -10.0f;
  model.add(std::move(layer));
  RngStream stream = rng.stream("dense-x");
  SparseForwardResult result = sparse_forward(model, random_input(stream, 1, 2, 5, 5));
  REQUIRE(result.layers.size() == 1);
  CHECK(result.layers[0].conv_sparse == result.layers[0].conv_dense);
  CHECK(result.macs_sparse == result.macs_dense);
}

TEST_CASE("same-mask mode spends no more sparse MACs than different-mask at equal layer sparsity") {
  // Hand-built masks at exactly 50% layer sparsity each way: the shared mask
  // concentrates the zeros onto common positions, so its union support is
  // half the positions, while the different masks spread zeros so their
  // union covers everything.
  Rng rng(312);
  auto run = [&](std::vector<std::vector<float>> mask_values, const std::string& name) {
    Model model;
    auto layer = small_sd(rng, name, MaskMode::kSparseDifferent);
    std::vector<Tensor> masks;
    for (auto& mv : mask_values) masks.push_back(Tensor::from_values({2, 2, 2, 2}, mv));
    layer->set_fixed_masks(masks);
    model.add(std::move(layer));
    RngStream stream = rng.stream("cmp-x");
    return sparse_forward(model, random_input(stream, 2, 2, 6, 6));
  };

  std::vector<float> shared(16, 0.0f);
  for (int i = 0; i < 8; ++i) shared[size_t(i)] = 1.0f;
  auto same = run({shared, shared}, "same");

  std::vector<float> d0(16, 0.0f), d1(16, 0.0f);
  for (int i = 0; i < 8; ++i) d0[size_t(i)] = 1.0f;        // first half
  for (int i = 8; i < 16; ++i) d1[size_t(i)] = 1.0f;       // second half
  auto diff = run({d0, d1}, "diff");

  CHECK(same.macs_sparse <= diff.macs_sparse);
  CHECK(same.layers[0].conv_sparse * 2 == diff.layers[0].conv_sparse);
}

TEST_CASE("report text and csv emission are well-formed") {
  Rng rng(313);
  ToyModelConfig cfg;
  Model model = build_toy_model(cfg, rng);
  SparsityReport sr = measure_sparsity(model);
  std::string text = sr.to_text();
  CHECK(text.find("sd1.layer_sparsity=") != std::string::npos);
  CHECK(text.find("global_density=") != std::string::npos);
  CHECK(sr.to_csv().find("layer,layer_sparsity") == 0);

  CostReport cr = count_cost(cost_model_from(model, 1, 28, 28));
  CHECK(cr.to_text().find("params_total=") != std::string::npos);
  CHECK(cr.to_csv().find("layer,params") == 0);
}
