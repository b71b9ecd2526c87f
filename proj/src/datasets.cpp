#include "sdconv/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "sdconv/error.hpp"

namespace sdconv {

namespace fs = std::filesystem;

namespace {

constexpr uint32_t kIdxImageMagic = 0x00000803;
constexpr uint32_t kIdxLabelMagic = 0x00000801;
constexpr int64_t kCifarRecordBytes = 1 + 3 * 32 * 32;

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file " + path);
  in.seekg(0, std::ios::end);
  std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw DataError("cannot read dataset file " + path);
  return bytes;
}

uint32_t read_u32_be(const std::vector<uint8_t>& b, size_t offset) {
  return (uint32_t(b[offset]) << 24) | (uint32_t(b[offset + 1]) << 16) |
         (uint32_t(b[offset + 2]) << 8) | uint32_t(b[offset + 3]);
}

void write_u32_be(std::ofstream& out, uint32_t v) {
  uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

[[noreturn]] void truncated(const std::string& path, size_t need, size_t have) {
  throw IngestionError("truncated file " + path + ": need " + std::to_string(need) +
                       " bytes but file ends at byte offset " + std::to_string(have));
}

}  // namespace

Normalization dataset_normalization(const std::string& id) {
  if (id == "mnist") return {{0.1307f}, {0.3081f}};
  if (id == "cifar10")
    return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  throw ConfigError("unknown dataset id '" + id + "' (expected mnist or cifar10)");
}

// ---- parsers ----------------------------------------------------------------------

RawImages parse_idx_images(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < 4) truncated(path, 4, bytes.size());
  uint32_t magic = read_u32_be(bytes, 0);
  if (magic != kIdxImageMagic) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "0x%08x", magic);
    throw IngestionError("bad IDX image magic " + std::string(hex) + " at byte offset 0 in " +
                         path);
  }
  if (bytes.size() < 16) truncated(path, 16, bytes.size());
  RawImages raw;
  raw.count = read_u32_be(bytes, 4);
  raw.rows = int(read_u32_be(bytes, 8));
  raw.cols = int(read_u32_be(bytes, 12));
  size_t need = 16 + size_t(raw.count) * size_t(raw.rows) * size_t(raw.cols);
  if (bytes.size() < need) truncated(path, need, bytes.size());
  raw.pixels.assign(bytes.begin() + 16, bytes.begin() + std::ptrdiff_t(need));
  return raw;
}

std::vector<uint8_t> parse_idx_labels(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < 4) truncated(path, 4, bytes.size());
  uint32_t magic = read_u32_be(bytes, 0);
  if (magic != kIdxLabelMagic) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "0x%08x", magic);
    throw IngestionError("bad IDX label magic " + std::string(hex) + " at byte offset 0 in " +
                         path);
  }
  if (bytes.size() < 8) truncated(path, 8, bytes.size());
  size_t count = read_u32_be(bytes, 4);
  size_t need = 8 + count;
  if (bytes.size() < need) truncated(path, need, bytes.size());
  for (size_t i = 0; i < count; ++i) {
    if (bytes[8 + i] > 9)
      throw IngestionError("label " + std::to_string(int(bytes[8 + i])) +
                           " out of range 0..9 at byte offset " + std::to_string(8 + i) +
                           " in " + path);
  }
  return {bytes.begin() + 8, bytes.begin() + std::ptrdiff_t(need)};
}

RawCifar parse_cifar_file(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() % size_t(kCifarRecordBytes) != 0) {
    size_t offset = bytes.size() - bytes.size() % size_t(kCifarRecordBytes);
    throw IngestionError("truncated record starting at byte offset " + std::to_string(offset) +
                         " in " + path + " (file size " + std::to_string(bytes.size()) +
                         " is not a multiple of " + std::to_string(kCifarRecordBytes) + ")");
  }
  RawCifar raw;
  raw.count = int64_t(bytes.size()) / kCifarRecordBytes;
  raw.labels.reserve(size_t(raw.count));
  raw.pixels.reserve(size_t(raw.count) * 3072);
  for (int64_t i = 0; i < raw.count; ++i) {
    size_t base = size_t(i) * size_t(kCifarRecordBytes);
    uint8_t label = bytes[base];
    if (label > 9)
      throw IngestionError("label " + std::to_string(int(label)) +
                           " out of range 0..9 at byte offset " + std::to_string(base) + " in " +
                           path);
    raw.labels.push_back(label);
    raw.pixels.insert(raw.pixels.end(), bytes.begin() + std::ptrdiff_t(base + 1),
                      bytes.begin() + std::ptrdiff_t(base + 1 + 3072));
  }
  return raw;
}

// ---- assembly --------------------------------------------------------------------

namespace {

Dataset assemble(const std::string& id, int channels, int height, int width,
                 const std::vector<uint8_t>& pixels, const std::vector<uint8_t>& labels) {
  Dataset ds;
  ds.id = id;
  ds.channels = channels;
  ds.height = height;
  ds.width = width;
  ds.count = int64_t(labels.size());
  if (ds.count == 0) throw DataError("dataset split for " + id + " is empty");

  Normalization norm = dataset_normalization(id);
  size_t plane = size_t(height) * size_t(width);
  ds.images.resize(size_t(ds.count) * size_t(channels) * plane);
  for (size_t i = 0; i < ds.images.size(); ++i) {
    size_t c = (i / plane) % size_t(channels);
    float v = float(pixels[i]) * (1.0f / 255.0f);
    ds.images[i] = (v - norm.mean[c]) / norm.std[c];
  }
  ds.labels.assign(labels.begin(), labels.end());
  return ds;
}

}  // namespace

Dataset load_dataset(const std::string& id, const std::string& root, Split split) {
  if (id == "mnist") {
    std::string stem = split == Split::kTrain ? "train" : "t10k";
    RawImages imgs = parse_idx_images(root + "/" + stem + "-images-idx3-ubyte");
    std::vector<uint8_t> labels = parse_idx_labels(root + "/" + stem + "-labels-idx1-ubyte");
    if (size_t(imgs.count) != labels.size())
      throw DataError("mnist " + stem + ": image count " + std::to_string(imgs.count) +
                      " does not match label count " + std::to_string(labels.size()));
    return assemble(id, 1, imgs.rows, imgs.cols, imgs.pixels, labels);
  }
  if (id == "cifar10") {
    std::vector<std::string> files;
    if (split == Split::kTrain) {
      for (int b = 1; b <= 5; ++b) files.push_back(root + "/data_batch_" + std::to_string(b) + ".bin");
    } else {
      files.push_back(root + "/test_batch.bin");
    }
    std::vector<uint8_t> pixels;
    std::vector<uint8_t> labels;
    for (const std::string& f : files) {
      RawCifar raw = parse_cifar_file(f);
      pixels.insert(pixels.end(), raw.pixels.begin(), raw.pixels.end());
      labels.insert(labels.end(), raw.labels.begin(), raw.labels.end());
    }
    return assemble(id, 3, 32, 32, pixels, labels);
  }
  throw ConfigError("unknown dataset id '" + id + "' (expected mnist or cifar10)");
}

// ---- batching --------------------------------------------------------------------

Tensor Dataset::gather(const std::vector<int64_t>& indices) const {
  if (indices.empty()) throw ContractError("gather requires at least one index");
  size_t sample_size = size_t(channels) * size_t(height) * size_t(width);
  std::vector<float> out(indices.size() * sample_size);
  for (size_t i = 0; i < indices.size(); ++i) {
    int64_t idx = indices[i];
    if (idx < 0 || idx >= count)
      throw ContractError("sample index " + std::to_string(idx) + " outside [0, " +
                          std::to_string(count) + ")");
    std::memcpy(out.data() + i * sample_size, images.data() + size_t(idx) * sample_size,
                sample_size * sizeof(float));
  }
  return Tensor::from_values({int(indices.size()), channels, height, width}, out);
}

Tensor Dataset::sample(int64_t index) const { return gather({index}); }

// ---- synthetic generation -----------------------------------------------------------

namespace {

/// Deterministic class prototype: a mixture of intensity blobs in [0,1].
std::vector<float> class_prototype(const Rng& rng, const std::string& dataset, int channels,
                                   int side, int cls) {
  RngStream stream = rng.stream("synth." + dataset + ".prototype", uint64_t(cls));
  size_t plane = size_t(side) * size_t(side);
  std::vector<float> proto(size_t(channels) * plane, 0.0f);
  const int blobs = 5;
  for (int b = 0; b < blobs; ++b) {
    double cy = stream.uniform(side * 0.2, side * 0.8);
    double cx = stream.uniform(side * 0.2, side * 0.8);
    double sigma = stream.uniform(side * 0.06, side * 0.14);
    double amp = stream.uniform(0.6, 1.0);
    // per-channel weights give color structure on multi-channel data
    std::vector<double> cw(size_t(channels), 0.0);
    for (auto& w : cw) w = stream.uniform(0.2, 1.0);
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          proto[size_t(c) * plane + size_t(y) * side + x] +=
              float(amp * cw[size_t(c)] * std::exp(-d2 / (2.0 * sigma * sigma)));
        }
  }
  float peak = 0.0f;
  for (float v : proto) peak = std::max(peak, v);
  if (peak > 0.0f)
    for (auto& v : proto) v /= peak;
  return proto;
}

/// Render one jittered sample of `proto` into bytes (appended to `out`).
void render_sample(const std::vector<float>& proto, int channels, int side, RngStream& stream,
                   std::vector<uint8_t>& out) {
  int dy = int(stream.uniform_int(-2, 2));
  int dx = int(stream.uniform_int(-2, 2));
  double gain = stream.uniform(0.85, 1.15);
  size_t plane = size_t(side) * size_t(side);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        int sy = y - dy;
        int sx = x - dx;
        double v = 0.0;
        if (sy >= 0 && sy < side && sx >= 0 && sx < side)
          v = gain * proto[size_t(c) * plane + size_t(sy) * side + sx];
        v += stream.normal(0.0, 0.05);
        v = std::clamp(v, 0.0, 1.0);
        out.push_back(uint8_t(std::lround(v * 255.0)));
      }
}

void write_idx_split(const std::string& root, const std::string& stem, const Rng& rng,
                     const std::string& stream_tag, int64_t count) {
  const int side = 28;
  std::vector<std::vector<float>> protos;
  for (int cls = 0; cls < 10; ++cls) protos.push_back(class_prototype(rng, "mnist", 1, side, cls));

  RngStream stream = rng.stream("synth.mnist." + stream_tag);
  std::vector<uint8_t> pixels;
  pixels.reserve(size_t(count) * side * side);
  std::vector<uint8_t> labels(size_t(count), 0);
  for (int64_t i = 0; i < count; ++i) {
    int cls = int(i % 10);  // interleaved so every prefix is class-balanced
    labels[size_t(i)] = uint8_t(cls);
    render_sample(protos[size_t(cls)], 1, side, stream, pixels);
  }

  std::ofstream img(root + "/" + stem + "-images-idx3-ubyte", std::ios::binary);
  write_u32_be(img, kIdxImageMagic);
  write_u32_be(img, uint32_t(count));
  write_u32_be(img, side);
  write_u32_be(img, side);
  img.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size()));

  std::ofstream lab(root + "/" + stem + "-labels-idx1-ubyte", std::ios::binary);
  write_u32_be(lab, kIdxLabelMagic);
  write_u32_be(lab, uint32_t(count));
  lab.write(reinterpret_cast<const char*>(labels.data()), std::streamsize(labels.size()));
}

void write_cifar_file(const std::string& path, const Rng& rng, const std::string& stream_tag,
                      const std::vector<std::vector<float>>& protos, int64_t count,
                      int64_t first_index) {
  const int side = 32;
  RngStream stream = rng.stream("synth.cifar10." + stream_tag);
  std::vector<uint8_t> bytes;
  bytes.reserve(size_t(count) * size_t(kCifarRecordBytes));
  for (int64_t i = 0; i < count; ++i) {
    int cls = int((first_index + i) % 10);
    bytes.push_back(uint8_t(cls));
    render_sample(protos[size_t(cls)], 3, side, stream, bytes);
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

}  // namespace

void write_synthetic_mnist(const std::string& root, uint64_t seed, int64_t train_count,
                           int64_t test_count) {
  fs::create_directories(root);
  Rng rng(seed);
  write_idx_split(root, "train", rng, "train", train_count);
  write_idx_split(root, "t10k", rng, "test", test_count);
}

void write_synthetic_cifar10(const std::string& root, uint64_t seed, int64_t train_count,
                             int64_t test_count) {
  fs::create_directories(root);
  Rng rng(seed);
  const int side = 32;
  std::vector<std::vector<float>> protos;
  for (int cls = 0; cls < 10; ++cls)
    protos.push_back(class_prototype(rng, "cifar10", 3, side, cls));

  int64_t per_file = (train_count + 4) / 5;
  int64_t written = 0;
  for (int b = 1; b <= 5; ++b) {
    int64_t n = std::min(per_file, train_count - written);
    write_cifar_file(root + "/data_batch_" + std::to_string(b) + ".bin", rng,
                     "train" + std::to_string(b), protos, n, written);
    written += n;
  }
  write_cifar_file(root + "/test_batch.bin", rng, "test", protos, test_count, 0);
}

bool ensure_dataset(const std::string& id, const std::string& root, uint64_t seed) {
  std::vector<std::string> required;
  if (id == "mnist") {
    required = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte"};
  } else if (id == "cifar10") {
    for (int b = 1; b <= 5; ++b) required.push_back("data_batch_" + std::to_string(b) + ".bin");
    required.push_back("test_batch.bin");
  } else {
    throw ConfigError("unknown dataset id '" + id + "' (expected mnist or cifar10)");
  }
  bool missing = false;
  for (const std::string& f : required)
    if (!fs::exists(fs::path(root) / f)) missing = true;
  if (!missing) return false;
  if (id == "mnist")
    write_synthetic_mnist(root, seed);
  else
    write_synthetic_cifar10(root, seed);
  return true;
}

// ---- transforms --------------------------------------------------------------------

Tensor augment_flip_pad_crop(const Tensor& batch, RngStream& stream) {
  const auto& shape = batch.shape();
  if (shape.size() != 4)
    throw DimensionError("augment expects a [n,c,h,w] batch, got rank " +
                         std::to_string(shape.size()));
  int64_t n = shape[0], c = shape[1], h = shape[2], w = shape[3];
  const int pad = 4;
  std::vector<float> out(size_t(batch.size()), 0.0f);
  const std::vector<float>& in = batch.values();
  size_t plane = size_t(h) * size_t(w);
  size_t sample_size = size_t(c) * plane;
  for (int64_t s = 0; s < n; ++s) {
    bool flip = stream.uniform() < 0.5;
    int oy = int(stream.uniform_int(0, 2 * pad));
    int ox = int(stream.uniform_int(0, 2 * pad));
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          // crop window (oy, ox) of the zero-padded (h+8, w+8) image
          int64_t sy = y + oy - pad;
          int64_t sx = x + ox - pad;
          float v = 0.0f;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
            int64_t src_x = flip ? (w - 1 - sx) : sx;
            v = in[size_t(s) * sample_size + size_t(ch) * plane + size_t(sy) * size_t(w) +
                   size_t(src_x)];
          }
          out[size_t(s) * sample_size + size_t(ch) * plane + size_t(y) * size_t(w) +
              size_t(x)] = v;
        }
  }
  return Tensor::from_values(shape, out);
}

Tensor with_gaussian_noise(const Tensor& batch, float sigma, RngStream& stream) {
  if (sigma < 0.0f) throw ConfigError("noise sigma must be >= 0, got " + std::to_string(sigma));
  if (sigma == 0.0f) return batch;
  std::vector<float> out = batch.values();
  for (auto& v : out) v += float(stream.normal(0.0, double(sigma)));
  return Tensor::from_values(batch.shape(), out);
}

}  // namespace sdconv
