// Benchmark: OpenMP convolution kernels against the serial reference, and the
// dense model forward against the sparse aggregated-kernel executor.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "sdconv/analyzer.hpp"
#include "sdconv/conv_kernels.hpp"
#include "sdconv/layers.hpp"
#include "sdconv/rng.hpp"
#include "sdconv/tensor.hpp"
#include "sdconv/zoo.hpp"

using namespace sdconv;

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

/// Median wall time of `repeats` calls, in milliseconds.
template <typename Fn>
double time_median_ms(int repeats, Fn&& fn) {
  std::vector<double> times;
  times.reserve(size_t(repeats));
  for (int r = 0; r < repeats; ++r) {
    double begin = now_ms();
    fn();
    times.push_back(now_ms() - begin);
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

std::vector<float> random_buffer(RngStream& stream, int64_t numel, double scale) {
  std::vector<float> out(size_t(numel), 0.0f);
  for (float& v : out) v = float(stream.normal(0.0, scale));
  return out;
}

struct ConvCase {
  const char* name;
  int batch, in_c, in_h, in_w, out_c, k, stride, padding, groups;
};

void bench_conv_kernels(int repeats) {
  const ConvCase cases[] = {
      {"stem 1->16 28x28 s2", 32, 1, 28, 28, 16, 3, 2, 1, 1},
      {"block 16->32 14x14 s2", 32, 16, 14, 14, 32, 3, 2, 1, 1},
      {"block 32->32 7x7", 32, 32, 7, 7, 32, 3, 1, 1, 1},
      {"mid 64->64 56x56", 4, 64, 56, 56, 64, 3, 1, 1, 1},
      {"grouped per-sample agg", 1, 32 * 16, 14, 14, 32 * 16, 3, 1, 1, 16},
  };

  std::printf("conv2d forward: OpenMP kernel vs serial reference (median of %d)\n", repeats);
  std::printf("%-26s %12s %12s %9s %12s\n", "case", "serial ms", "parallel ms", "speedup",
              "max |diff|");
  Rng rng(99);
  for (const ConvCase& c : cases) {
    Conv2dGeom g = make_conv2d_geom(c.batch, c.in_c, c.in_h, c.in_w, c.out_c, c.k, c.k,
                                    c.stride, c.padding, c.groups);
    RngStream stream = rng.stream("bench", uint64_t(&c - cases));
    std::vector<float> x = random_buffer(stream, g.input_numel(), 1.0);
    std::vector<float> w = random_buffer(stream, g.weight_numel(), 0.1);
    std::vector<float> b = random_buffer(stream, g.out_c, 0.1);
    std::vector<float> y_par(size_t(g.output_numel()), 0.0f);
    std::vector<float> y_ser(size_t(g.output_numel()), 0.0f);

    double serial_ms = time_median_ms(repeats, [&] {
      reference::conv2d_forward_serial(x.data(), w.data(), b.data(), y_ser.data(), g);
    });
    double parallel_ms = time_median_ms(
        repeats, [&] { conv2d_forward(x.data(), w.data(), b.data(), y_par.data(), g); });

    float max_diff = 0.0f;
    for (size_t i = 0; i < y_par.size(); ++i) {
      max_diff = std::max(max_diff, std::fabs(y_par[i] - y_ser[i]));
    }
    std::printf("%-26s %12.3f %12.3f %8.2fx %12.3e\n", c.name, serial_ms, parallel_ms,
                serial_ms / std::max(parallel_ms, 1e-9), double(max_diff));
  }
}

/// Fixed masks holding `density` of each expert's weights. Every expert
/// shares the zero set, so the aggregated kernel's density matches and the
/// sparse executor has work to skip.
void install_masks(Model& model, double density) {
  for (SDConv2d* layer : model.sdconv_layers()) {
    const int k = layer->config().num_experts;
    const size_t numel = size_t(layer->expert(0).value.size());
    const size_t zeros = size_t(double(numel) * (1.0 - density));
    std::vector<Tensor> masks;
    for (int i = 0; i < k; ++i) {
      Tensor mask = Tensor::full(layer->expert(i).value.shape(), 1.0f);
      // Spread the zeros across the kernel instead of blanking one block.
      for (size_t z = 0; z < zeros; ++z) {
        mask.mutable_values()[(z * numel) / std::max<size_t>(zeros, 1)] = 0.0f;
      }
      masks.push_back(mask);
    }
    layer->set_fixed_masks(masks);
  }
}

void bench_sparse_executor(int repeats, int batch) {
  ToyModelConfig cfg;
  cfg.mode = MaskMode::kSparseSame;  // shared masks: aggregated kernel stays sparse
  Rng rng(7);
  Model model = build_toy_model(cfg, rng);

  RngStream stream = rng.stream("bench-input");
  Tensor x = Tensor::from_values({batch, 1, 28, 28},
                                 random_buffer(stream, int64_t(batch) * 28 * 28, 1.0));

  std::printf("\ntoy model, batch %d: dense forward vs sparse aggregated-kernel executor\n",
              batch);
  std::printf("%-10s %12s %12s %14s %14s %10s\n", "density", "dense ms", "sparse ms",
              "macs_dense", "macs_sparse", "mac ratio");
  NoGradGuard guard;
  for (double density : {1.0, 0.5, 0.2, 0.1}) {
    install_masks(model, density);

    double dense_ms = time_median_ms(repeats, [&] {
      ForwardCtx ctx;
      model.forward(x, ctx);
    });
    SparseForwardResult result = sparse_forward(model, x);
    double sparse_ms = time_median_ms(repeats, [&] { sparse_forward(model, x); });

    std::printf("%-10.2f %12.3f %12.3f %14lld %14lld %9.3f%%\n", density, dense_ms, sparse_ms,
                result.macs_dense, result.macs_sparse,
                100.0 * double(result.macs_sparse) / double(result.macs_dense));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolution kernel and sparse-executor benchmark"};
  int repeats = 5;
  int batch = 32;
  app.add_option("--repeats", repeats, "timing repetitions per case (median reported)")
      ->check(CLI::PositiveNumber);
  app.add_option("--batch", batch, "batch size for the model-level comparison")
      ->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  bench_conv_kernels(repeats);
  bench_sparse_executor(repeats, batch);
  return 0;
}
