#include "sdconv/zoo.hpp"

#include <algorithm>
#include <memory>

#include "sdconv/error.hpp"

namespace sdconv {

namespace {

int conv_out_dim(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

/// Channel rounding used by MobileNetV2 width scaling: round to the nearest
/// multiple of `divisor`, never dropping more than 10% of the original.
int make_divisible(double v, int divisor = 8) {
  int rounded = std::max(divisor, int(v + divisor / 2.0) / divisor * divisor);
  if (double(rounded) < 0.9 * v) rounded += divisor;
  return rounded;
}

/// Incremental cost-model builder tracking the running feature-map shape.
struct ArchBuilder {
  CostModel cm;
  int c = 0, h = 0, w = 0;
  bool dynamic = false;  // convert convs after the first into dynamic layers
  int experts = 4;
  int reduce = 16;
  int conv_count = 0;

  void conv(const std::string& name, int out_c, int kernel, int stride, int pad,
            int groups = 1, bool bias = false) {
    CostEntry e;
    e.name = name;
    e.out_c = out_c;
    e.in_c_per_group = c / groups;
    e.k_h = e.k_w = kernel;
    e.out_h = conv_out_dim(h, kernel, stride, pad);
    e.out_w = conv_out_dim(w, kernel, stride, pad);
    e.bias = bias;
    // the first convolution of every architecture stays static
    if (dynamic && conv_count > 0) {
      e.kind = CostEntry::Kind::kDynamic;
      e.num_experts = experts;
      e.attn_in_c = c;
      e.attn_in_h = h;
      e.attn_in_w = w;
      e.attn_hidden = std::max(1, c / reduce);
    } else {
      e.kind = CostEntry::Kind::kConv;
    }
    cm.entries.push_back(e);
    ++conv_count;
    c = out_c;
    h = e.out_h;
    w = e.out_w;
  }

  void bn(const std::string& name) {
    CostEntry e;
    e.kind = CostEntry::Kind::kBatchNorm;
    e.name = name;
    e.channels = c;
    cm.entries.push_back(e);
  }

  void maxpool(int kernel, int stride, int pad) {
    h = conv_out_dim(h, kernel, stride, pad);
    w = conv_out_dim(w, kernel, stride, pad);
  }

  void gap() {
    h = 1;
    w = 1;
  }

  void fc(const std::string& name, int out_f) {
    CostEntry e;
    e.kind = CostEntry::Kind::kLinear;
    e.name = name;
    e.in_features = c;
    e.out_features = out_f;
    e.bias = true;
    e.classifier = true;
    cm.entries.push_back(e);
    c = out_f;
  }
};

void resnet_basic_block(ArchBuilder& b, const std::string& name, int planes, int stride) {
  int in_c = b.c, in_h = b.h, in_w = b.w;
  b.conv(name + ".conv1", planes, 3, stride, 1);
  b.bn(name + ".bn1");
  b.conv(name + ".conv2", planes, 3, 1, 1);
  b.bn(name + ".bn2");
  if (stride != 1 || in_c != planes) {
    // downsample path runs on the block input
    int save_c = b.c, save_h = b.h, save_w = b.w;
    b.c = in_c;
    b.h = in_h;
    b.w = in_w;
    b.conv(name + ".downsample", planes, 1, stride, 0);
    b.bn(name + ".downsample_bn");
    b.c = save_c;
    b.h = save_h;
    b.w = save_w;
  }
}

void resnet_bottleneck_block(ArchBuilder& b, const std::string& name, int planes,
                             int stride) {
  int in_c = b.c, in_h = b.h, in_w = b.w;
  int out_c = planes * 4;
  b.conv(name + ".conv1", planes, 1, 1, 0);
  b.bn(name + ".bn1");
  b.conv(name + ".conv2", planes, 3, stride, 1);
  b.bn(name + ".bn2");
  b.conv(name + ".conv3", out_c, 1, 1, 0);
  b.bn(name + ".bn3");
  if (stride != 1 || in_c != out_c) {
    int save_c = b.c, save_h = b.h, save_w = b.w;
    b.c = in_c;
    b.h = in_h;
    b.w = in_w;
    b.conv(name + ".downsample", out_c, 1, stride, 0);
    b.bn(name + ".downsample_bn");
    b.c = save_c;
    b.h = save_h;
    b.w = save_w;
  }
}

void build_resnet(ArchBuilder& b, const std::vector<int>& blocks, bool bottleneck,
                  int num_classes) {
  b.conv("stem.conv", 64, 7, 2, 3);
  b.bn("stem.bn");
  b.maxpool(3, 2, 1);
  const int planes[4] = {64, 128, 256, 512};
  const int strides[4] = {1, 2, 2, 2};
  for (int stage = 0; stage < 4; ++stage) {
    for (int block = 0; block < blocks[size_t(stage)]; ++block) {
      std::string name =
          "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block + 1);
      int stride = block == 0 ? strides[stage] : 1;
      if (bottleneck) {
        resnet_bottleneck_block(b, name, planes[stage], stride);
      } else {
        resnet_basic_block(b, name, planes[stage], stride);
      }
    }
  }
  b.gap();
  b.fc("fc", num_classes);
}

void mbv2_inverted_residual(ArchBuilder& b, const std::string& name, int expand,
                            int out_c, int stride) {
  int in_c = b.c;
  int hidden = in_c * expand;
  if (expand != 1) {
    b.conv(name + ".expand", hidden, 1, 1, 0);
    b.bn(name + ".expand_bn");
  }
  b.conv(name + ".depthwise", hidden, 3, stride, 1, /*groups=*/hidden);
  b.bn(name + ".depthwise_bn");
  b.conv(name + ".project", out_c, 1, 1, 0);
  b.bn(name + ".project_bn");
}

void build_mobilenetv2(ArchBuilder& b, double alpha, int num_classes) {
  struct Row {
    int t, c, n, s;
  };
  const Row rows[] = {{1, 16, 1, 1},  {6, 24, 2, 2},  {6, 32, 3, 2}, {6, 64, 4, 2},
                      {6, 96, 3, 1},  {6, 160, 3, 2}, {6, 320, 1, 1}};
  int stem = make_divisible(32 * alpha);
  b.conv("stem.conv", stem, 3, 2, 1);
  b.bn("stem.bn");
  int block_idx = 0;
  for (const Row& row : rows) {
    int out_c = make_divisible(row.c * alpha);
    for (int i = 0; i < row.n; ++i) {
      std::string name = "block" + std::to_string(++block_idx);
      mbv2_inverted_residual(b, name, row.t, out_c, i == 0 ? row.s : 1);
    }
  }
  int head = alpha > 1.0 ? make_divisible(1280 * alpha) : 1280;
  b.conv("head.conv", head, 1, 1, 0);
  b.bn("head.bn");
  b.gap();
  b.fc("fc", num_classes);
}

}  // namespace

std::vector<std::string> zoo_model_ids() {
  std::vector<std::string> ids;
  for (const char* base : {"resnet10", "resnet18", "resnet50", "mobilenetv2-0.5",
                           "mobilenetv2-0.75", "mobilenetv2-1.0"}) {
    ids.push_back(base);
    ids.push_back(std::string("dy-") + base);
  }
  return ids;
}

CostModel build_cost_model(const std::string& id, int resolution, const ZooOptions& options) {
  if (resolution < 32) throw ConfigError("zoo resolution must be at least 32");
  if (options.num_experts < 1) throw ConfigError("zoo num_experts must be >= 1");
  if (options.reduce_ratio < 1) throw ConfigError("zoo reduce_ratio must be >= 1");

  std::string base = id;
  bool dynamic = false;
  if (base.rfind("dy-", 0) == 0) {
    dynamic = true;
    base = base.substr(3);
  }

  ArchBuilder b;
  b.c = 3;
  b.h = resolution;
  b.w = resolution;
  // a single expert degenerates to the static architecture exactly
  b.dynamic = dynamic && options.num_experts > 1;
  b.experts = options.num_experts;
  b.reduce = options.reduce_ratio;
  b.cm.name = id;
  b.cm.input_c = 3;
  b.cm.input_h = resolution;
  b.cm.input_w = resolution;

  if (base == "resnet10") {
    build_resnet(b, {1, 1, 1, 1}, false, options.num_classes);
  } else if (base == "resnet18") {
    build_resnet(b, {2, 2, 2, 2}, false, options.num_classes);
  } else if (base == "resnet50") {
    build_resnet(b, {3, 4, 6, 3}, true, options.num_classes);
  } else if (base == "mobilenetv2-0.5") {
    build_mobilenetv2(b, 0.5, options.num_classes);
  } else if (base == "mobilenetv2-0.75") {
    build_mobilenetv2(b, 0.75, options.num_classes);
  } else if (base == "mobilenetv2-1.0") {
    build_mobilenetv2(b, 1.0, options.num_classes);
  } else {
    throw ConfigError("unknown zoo model '" + id + "'");
  }

  // structural invariant: the first costed convolution is static
  for (const CostEntry& e : b.cm.entries) {
    if (e.kind == CostEntry::Kind::kConv || e.kind == CostEntry::Kind::kDynamic) {
      if (e.kind != CostEntry::Kind::kConv) {
        throw ContractError("zoo model '" + id + "' lost its static first layer");
      }
      break;
    }
  }
  return b.cm;
}

Model build_toy_model(const ToyModelConfig& cfg, Rng& rng) {
  if (cfg.in_channels <= 0 || cfg.num_classes <= 0) {
    throw ConfigError("toy model: channel and class counts must be positive");
  }
  Model model;

  StaticConvConfig stem;
  stem.in_channels = cfg.in_channels;
  stem.out_channels = 16;
  stem.kernel_h = stem.kernel_w = 3;
  stem.stride = 2;
  stem.padding = 1;
  model.add(std::make_unique<StaticConv2d>("conv1", stem, rng));
  model.add(std::make_unique<ReLULayer>("relu1"));

  SDConvConfig sd1;
  sd1.in_channels = 16;
  sd1.out_channels = 32;
  sd1.kernel_h = sd1.kernel_w = 3;
  sd1.stride = 2;
  sd1.padding = 1;
  sd1.num_experts = cfg.num_experts;
  sd1.reduce_ratio = cfg.reduce_ratio;
  sd1.sharpness = cfg.sharpness;
  sd1.mode = cfg.mode;
  model.add(std::make_unique<SDConv2d>("sd1", sd1, rng));
  model.add(std::make_unique<ReLULayer>("relu2"));

  SDConvConfig sd2 = sd1;
  sd2.in_channels = 32;
  sd2.out_channels = 32;
  model.add(std::make_unique<SDConv2d>("sd2", sd2, rng));
  model.add(std::make_unique<ReLULayer>("relu3"));

  model.add(std::make_unique<GlobalAvgPoolLayer>("pool"));
  model.add(std::make_unique<DenseLayer>("fc", 32, cfg.num_classes, rng));
  return model;
}

}  // namespace sdconv
