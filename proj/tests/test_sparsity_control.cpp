#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "sdconv/error.hpp"
#include "sdconv/layers.hpp"
#include "sdconv/optimizer.hpp"
#include "sdconv/rng.hpp"
#include "sdconv/sparsity.hpp"
#include "support/oracles.hpp"

using namespace sdconv;

namespace {

MaskRecord record_of(const std::vector<float>& mask_values, float multiplier,
                     size_t logical) {
  return MaskRecord{Tensor::from_values({int(mask_values.size())}, mask_values), multiplier,
                    logical};
}

}  // namespace

TEST_CASE("schedule boundary sequence for s=0.5, n=4") {
  auto sched = SparsitySchedule::make(0.5f, 4, 500);
  CHECK(sched.phase_len == 100);
  // before the first boundary the target stays fully dense
  CHECK(sched.advance(1) == doctest::Approx(1.0f));
  CHECK(sched.advance(99) == doctest::Approx(1.0f));
  CHECK(sched.advance(100) == doctest::Approx(0.840896f).epsilon(1e-5));
  CHECK(sched.advance(150) == doctest::Approx(0.840896f).epsilon(1e-5));
  CHECK(sched.advance(200) == doctest::Approx(0.707107f).epsilon(1e-5));
  CHECK(sched.advance(300) == doctest::Approx(0.594604f).epsilon(1e-5));
  CHECK(sched.advance(400) == doctest::Approx(0.5f));
  // final boundary: exponent clamps at 1 so the target stays at 0.5
  CHECK(sched.advance(500) == doctest::Approx(0.5f));
}

TEST_CASE("schedule targets are non-increasing and end exactly at final density") {
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    RngStream stream = rng.stream("sched", trial);
    float s = static_cast<float>(stream.uniform(0.0, 0.95));
    int n = 1 + int(stream.uniform_int(0, 5));
    long long total = (n + 1) * (1 + int(stream.uniform_int(0, 50)));
    auto sched = SparsitySchedule::make(s, n, total);
    float prev = 1.0f;
    float last = 1.0f;
    for (long long t = 1; t <= total; ++t) {
      float cur = sched.advance(t);
      CHECK(cur <= prev + 1e-7f);
      prev = cur;
      last = cur;
    }
    CHECK(last == doctest::Approx(1.0f - s).epsilon(1e-6));
  }
}

TEST_CASE("schedule rejects impossible configurations") {
  CHECK_THROWS_AS(SparsitySchedule::make(1.0f, 4, 100), ConfigError);
  CHECK_THROWS_AS(SparsitySchedule::make(-0.1f, 4, 100), ConfigError);
  CHECK_THROWS_AS(SparsitySchedule::make(0.5f, 0, 100), ConfigError);
  CHECK_THROWS_AS(SparsitySchedule::make(0.5f, 4, 4), ContractError);  // phase length 0
  auto sched = SparsitySchedule::make(0.5f, 4, 500);
  CHECK_THROWS_AS(sched.advance(0), ContractError);
  CHECK_THROWS_AS(sched.advance(501), ContractError);
}

TEST_CASE("l0 penalty hand cases") {
  // all masks ones, target density 0.5 -> (N - 0.5N)/N = 0.5
  auto all_ones = record_of(std::vector<float>(40, 1.0f), 1.0f, 40);
  CHECK(l0_penalty({all_ones}, 0.5f).item() == doctest::Approx(0.5f));

  // global density 0.4 under target 0.5 -> clipped to zero
  std::vector<float> forty(40, 0.0f);
  for (int i = 0; i < 16; ++i) forty[size_t(i)] = 1.0f;
  CHECK(l0_penalty({record_of(forty, 1.0f, 40)}, 0.5f).item() == doctest::Approx(0.0f));

  // two layers N=[100,300], nnz=[100,100], target 0.25 -> (200-100)/400 = 0.25
  std::vector<float> layer_a(100, 1.0f);
  std::vector<float> layer_b(300, 0.0f);
  for (int i = 0; i < 100; ++i) layer_b[size_t(i)] = 1.0f;
  CHECK(l0_penalty({record_of(layer_a, 1.0f, 100), record_of(layer_b, 1.0f, 300)}, 0.25f)
            .item() == doctest::Approx(0.25f));

  // no masks -> constant zero
  CHECK(l0_penalty({}, 0.5f).item() == 0.0f);
}

TEST_CASE("l0 penalty equals brute-force counting on random binary masks") {
  Rng rng(73);
  for (int trial = 0; trial < 30; ++trial) {
    RngStream stream = rng.stream("l0", trial);
    int layers = 1 + int(stream.uniform_int(0, 3));
    std::vector<MaskRecord> records;
    long long nnz = 0, total = 0;
    for (int l = 0; l < layers; ++l) {
      int n = 10 + int(stream.uniform_int(0, 200));
      float mult = (stream.uniform() < 0.3) ? 4.0f : 1.0f;
      std::vector<float> mask(size_t(n), 0.0f);
      for (auto& v : mask) v = stream.uniform() < 0.5 ? 1.0f : 0.0f;
      long long ones = 0;
      for (float v : mask) ones += v == 1.0f ? 1 : 0;
      records.push_back(record_of(mask, mult, size_t(n) * size_t(mult)));
      nnz += ones * (long long)(mult);
      total += (long long)(n) * (long long)(mult);
    }
    float target = static_cast<float>(stream.uniform(0.0, 1.0));
    double expect = std::max(0.0, (double(nnz) - double(target) * double(total)) / double(total));
    CHECK(l0_penalty(records, target).item() ==
          doctest::Approx(float(expect)).epsilon(1e-6));
  }
}

TEST_CASE("l0 penalty gradient reaches the threshold through the mask graph") {
  Rng rng(79);
  SDConvConfig cfg;
  cfg.in_channels = 4;
  cfg.out_channels = 4;
  cfg.kernel_h = cfg.kernel_w = 3;
  cfg.num_experts = 2;
  cfg.reduce_ratio = 2;
  cfg.sharpness = 0.2f;  // soft enough that the gradient is non-degenerate
  SDConv2d layer("sd", cfg, rng);

  LayerMasks masks = layer.build_masks();
  std::vector<MaskRecord> records;
  size_t numel = layer.expert(0).value.size();
  for (const Tensor& soft : masks.soft) records.push_back(MaskRecord{soft, 1.0f, numel});

  // tau = 0 keeps nearly everything on: density > 0.25 target, penalty active
  Tensor penalty = l0_penalty(records, 0.25f);
  REQUIRE(penalty.item() > 0.0f);
  backward(penalty);
  // raising tau prunes more, so the penalty must fall: negative gradient
  CHECK(layer.threshold().value.grad()[0] < 0.0f);
}

TEST_CASE("total loss decomposes into its logged components") {
  Rng rng(83);
  Model model;
  SDConvConfig cfg;
  cfg.in_channels = 2;
  cfg.out_channels = 4;
  cfg.kernel_h = cfg.kernel_w = 3;
  cfg.padding = 1;
  cfg.num_experts = 2;
  cfg.reduce_ratio = 2;
  model.add(std::make_unique<SDConv2d>("sd1", cfg, rng));
  model.add(std::make_unique<GlobalAvgPoolLayer>("pool"));
  model.add(std::make_unique<DenseLayer>("fc", 4, 3, rng));

  RngStream stream = rng.stream("loss-x");
  std::vector<float> xv(2 * 2 * 5 * 5);
  for (auto& v : xv) v = static_cast<float>(stream.uniform(-1.0, 1.0));
  Tensor x = Tensor::from_values({2, 2, 5, 5}, xv);
  ForwardCtx ctx;
  ctx.training = true;
  Tensor logits = model.forward(x, ctx);

  auto params = model.parameters();
  LossBreakdown lb = total_loss(logits, {0, 2}, ctx.masks, 0.5f, 0.01f, 4e-5f, params);
  CHECK(lb.total.item() ==
        doctest::Approx(lb.task + 0.01f * lb.sparsity + 4e-5f * lb.decay).epsilon(1e-6));
  CHECK(lb.decay > 0.0f);

  // lambda_s = 0 reduces the total to task + decay
  LossBreakdown no_sparse = total_loss(logits, {0, 2}, ctx.masks, 0.5f, 0.0f, 4e-5f, params);
  CHECK(no_sparse.total.item() ==
        doctest::Approx(no_sparse.task + 4e-5f * no_sparse.decay).epsilon(1e-6));
  CHECK(no_sparse.sparsity == 0.0f);

  // gradients flow end to end, including into tau
  backward(lb.total);
  auto* sd = dynamic_cast<SDConv2d*>(model.find("sd1"));
  REQUIRE(sd != nullptr);
  CHECK(sd->threshold().value.grad().size() == 1);
}

TEST_CASE("weight decay touches decaying parameters only") {
  Rng rng(89);
  Model model;
  SDConvConfig cfg;
  cfg.in_channels = 2;
  cfg.out_channels = 2;
  cfg.kernel_h = cfg.kernel_w = 1;
  cfg.num_experts = 2;
  cfg.reduce_ratio = 1;
  cfg.mode = MaskMode::kDynamicDense;  // no mask graph: isolates the decay term
  model.add(std::make_unique<SDConv2d>("sd1", cfg, rng));

  double expect = 0.0;
  for (const auto& named : model.parameters()) {
    if (!named.param->apply_decay) continue;
    for (float v : named.param->value.values()) expect += 0.5 * double(v) * double(v);
  }

  RngStream stream = rng.stream("decay-x");
  std::vector<float> xv(1 * 2 * 2 * 2);
  for (auto& v : xv) v = static_cast<float>(stream.uniform(-1.0, 1.0));
  Tensor x = Tensor::from_values({1, 2, 2, 2}, xv);
  ForwardCtx ctx;
  Tensor logits = reshape(global_avg_pool(model.forward(x, ctx)), {1, 2});
  LossBreakdown lb = total_loss(logits, {0}, ctx.masks, 1.0f, 0.01f, 4e-5f,
                                model.parameters());
  CHECK(lb.decay == doctest::Approx(float(expect)).epsilon(1e-6));

  // tau is excluded from decay by construction
  auto* sd = dynamic_cast<SDConv2d*>(model.find("sd1"));
  CHECK_FALSE(sd->threshold().apply_decay);
}

// ---- learning-rate schedule -------------------------------------------------

TEST_CASE("cosine warmup learning rate") {
  CHECK(cosine_warmup_lr(0, 0.1f, 10, 110) == doctest::Approx(0.0f));
  CHECK(cosine_warmup_lr(5, 0.1f, 10, 110) == doctest::Approx(0.05f));
  CHECK(cosine_warmup_lr(10, 0.1f, 10, 110) == doctest::Approx(0.1f));
  // midpoint of the cosine leg: (10+110)/2 = 60 -> max/2
  CHECK(cosine_warmup_lr(60, 0.1f, 10, 110) == doctest::Approx(0.05f).epsilon(1e-6));
  CHECK(cosine_warmup_lr(110, 0.1f, 10, 110) == doctest::Approx(0.0f));
  CHECK(cosine_warmup_lr(200, 0.1f, 10, 110) == doctest::Approx(0.0f));
  CHECK_THROWS_AS(cosine_warmup_lr(0, 0.1f, 10, 10), ContractError);
  // no warmup: starts directly at max_lr
  CHECK(cosine_warmup_lr(0, 0.1f, 0, 100) == doctest::Approx(0.1f));
}

// ---- optimizer ----------------------------------------------------------------

namespace {

struct Bench {
  Parameter weight{"w", Tensor::from_values({2}, {1.0f, -2.0f}, true), false, true};
  Parameter tau{"tau", Tensor::scalar(0.5f, true), true, false};

  std::vector<NamedParameter> named() {
    return {NamedParameter{"layer.w", &weight}, NamedParameter{"layer.tau", &tau}};
  }
};

}  // namespace

TEST_CASE("plain SGD when momentum is zero") {
  Bench b;
  OptimizerConfig cfg;
  cfg.momentum = 0.0f;
  SgdOptimizer opt(b.named(), cfg);
  b.weight.value.mutable_grad() = {0.5f, -1.0f};
  opt.step(0.1f);
  CHECK(b.weight.value.values()[0] == doctest::Approx(1.0f - 0.1f * 0.5f));
  CHECK(b.weight.value.values()[1] == doctest::Approx(-2.0f + 0.1f * 1.0f));
}

TEST_CASE("momentum accumulates: two constant-gradient steps displace by lr*g*2.9") {
  Bench b;
  OptimizerConfig cfg;
  cfg.momentum = 0.9f;
  SgdOptimizer opt(b.named(), cfg);
  float g = 0.4f, lr = 0.1f;
  b.weight.value.mutable_grad() = {g, g};
  opt.step(lr);
  b.weight.value.mutable_grad() = {g, g};
  opt.step(lr);
  // v1 = g; v2 = 0.9 g + g = 1.9 g; total displacement lr·g·(1 + 1.9)
  CHECK(b.weight.value.values()[0] == doctest::Approx(1.0f - lr * g * 2.9f).epsilon(1e-6));
}

TEST_CASE("zero gradient from rest leaves parameters unchanged") {
  Bench b;
  SgdOptimizer opt(b.named(), OptimizerConfig{});
  b.weight.value.mutable_grad() = {0.0f, 0.0f};
  b.tau.value.mutable_grad() = {0.0f};
  opt.step(0.1f);
  CHECK(b.weight.value.values()[0] == 1.0f);
  CHECK(b.tau.value.values()[0] == 0.5f);
}

TEST_CASE("unpopulated gradients are skipped entirely") {
  Bench b;
  SgdOptimizer opt(b.named(), OptimizerConfig{});
  opt.step(0.1f);
  CHECK(b.weight.value.values()[0] == 1.0f);
  CHECK(b.tau.value.values()[0] == 0.5f);
}

TEST_CASE("threshold updates use plain SGD with its own rate and clipping") {
  Bench b;
  OptimizerConfig cfg;
  cfg.tau_lr_scale = 0.1f;
  cfg.tau_grad_clip = 5.0f;
  SgdOptimizer opt(b.named(), cfg);

  b.tau.value.mutable_grad() = {100.0f};  // spikes clip to 5
  opt.step(0.2f);
  CHECK(b.tau.value.values()[0] == doctest::Approx(0.5f - 0.2f * 0.1f * 5.0f));

  // no momentum carry-over: a zero gradient leaves tau in place
  b.tau.value.mutable_grad() = {0.0f};
  float before = b.tau.value.values()[0];
  opt.step(0.2f);
  CHECK(b.tau.value.values()[0] == before);
}

TEST_CASE("frozen thresholds never move") {
  Bench b;
  OptimizerConfig cfg;
  cfg.freeze_thresholds = true;
  SgdOptimizer opt(b.named(), cfg);
  b.tau.value.mutable_grad() = {1.0f};
  b.weight.value.mutable_grad() = {1.0f, 1.0f};
  opt.step(0.1f);
  CHECK(b.tau.value.values()[0] == 0.5f);       // untouched
  CHECK(b.weight.value.values()[0] != 1.0f);    // ordinary params still learn
}

TEST_CASE("optimizer state exposes momentum buffers for checkpointing") {
  Bench b;
  SgdOptimizer opt(b.named(), OptimizerConfig{});
  auto state = opt.state();
  REQUIRE(state.size() == 1);  // tau carries no momentum buffer
  CHECK(state[0].first == "opt.v.layer.w");
  CHECK(state[0].second->size() == 2);
}

TEST_CASE("optimizer validates its configuration") {
  Bench b;
  OptimizerConfig bad;
  bad.momentum = 1.0f;
  CHECK_THROWS_AS(SgdOptimizer(b.named(), bad), ConfigError);
  bad = OptimizerConfig{};
  bad.tau_grad_clip = 0.0f;
  CHECK_THROWS_AS(SgdOptimizer(b.named(), bad), ConfigError);
}
