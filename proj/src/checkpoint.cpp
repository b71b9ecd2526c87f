#include "sdconv/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sdconv/error.hpp"

namespace sdconv {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'C', 'V'};
constexpr uint32_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n, const char* what) {
    if (pos + n > bytes.size())
      throw IngestionError(std::string("truncated checkpoint ") + path + ": need " +
                           std::to_string(n) + " bytes for " + what + " at byte offset " +
                           std::to_string(pos) + ", file ends at " +
                           std::to_string(bytes.size()));
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = uint16_t(bytes[pos]) | uint16_t(uint16_t(bytes[pos + 1]) << 8);
    pos += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[pos + size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return bytes[pos++];
  }
};

}  // namespace

const Tensor& CheckpointData::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw DataError("checkpoint has no tensor named '" + name + "'");
}

bool CheckpointData::has_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, data.version);
  put_u32(out, uint32_t(data.tensors.size()));
  for (const auto& [name, tensor] : data.tensors) {
    if (name.size() > 0xffff)
      throw ContractError("tensor name longer than 65535 bytes: " + name.substr(0, 40) + "...");
    const Shape& shape = tensor.shape();
    if (shape.size() > 0xff)
      throw ContractError("tensor rank " + std::to_string(shape.size()) + " exceeds format limit");
    put_u16(out, uint16_t(name.size()));
    out.append(name);
    out.push_back(char(uint8_t(shape.size())));
    for (int d : shape) put_u32(out, uint32_t(d));
    const std::vector<float>& v = tensor.values();
    for (float f : v) {
      uint32_t bits = 0;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  out.append(data.config_text);

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw DataError("cannot open checkpoint file for writing: " + path);
  file.write(out.data(), std::streamsize(out.size()));
  if (!file) throw DataError("failed writing checkpoint file: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open checkpoint file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                             std::istreambuf_iterator<char>());

  Reader r{bytes, 0, path};
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw IngestionError("bad checkpoint magic at byte offset 0 in " + path +
                         " (expected \"SDCV\")");
  r.pos = 4;

  CheckpointData data;
  data.version = r.u32("version");
  if (data.version != kVersion)
    throw IngestionError("unsupported checkpoint version " + std::to_string(data.version) +
                         " at byte offset 4 in " + path);
  uint32_t count = r.u32("tensor count");
  data.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = r.u16("tensor name length");
    r.need(name_len, "tensor name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
    r.pos += name_len;
    uint8_t rank = r.u8("tensor rank");
    Shape shape;
    int64_t numel = 1;
    for (int d = 0; d < int(rank); ++d) {
      uint32_t dim = r.u32("tensor dim");
      shape.push_back(int(dim));
      numel *= int64_t(dim);
    }
    r.need(size_t(numel) * 4, "tensor payload");
    std::vector<float> values(size_t(numel), 0.0f);
    for (int64_t j = 0; j < numel; ++j) {
      uint32_t bits = 0;
      std::memcpy(&bits, bytes.data() + r.pos + size_t(j) * 4, 4);
      float f = 0.0f;
      std::memcpy(&f, &bits, 4);
      values[size_t(j)] = f;
    }
    r.pos += size_t(numel) * 4;
    data.tensors.emplace_back(std::move(name), Tensor::from_values(shape, std::move(values)));
  }
  data.config_text.assign(reinterpret_cast<const char*>(bytes.data() + r.pos),
                          bytes.size() - r.pos);
  return data;
}

CheckpointData build_checkpoint(Model& model, SgdOptimizer* optimizer, int64_t step,
                                float schedule_density, const std::string& config_text) {
  CheckpointData data;
  data.config_text = config_text;
  data.tensors.emplace_back("state.step", Tensor::scalar(float(step)));
  data.tensors.emplace_back("state.schedule_density", Tensor::scalar(schedule_density));
  for (const NamedParameter& np : model.parameters()) {
    // snapshot a detached copy so later training steps don't mutate the saved view
    data.tensors.emplace_back(np.name,
                              Tensor::from_values(np.param->value.shape(), np.param->value.values()));
  }
  if (optimizer) {
    // velocity buffers are flat; store them as rank-1 rows
    for (const auto& [name, buffer] : optimizer->state())
      data.tensors.emplace_back(name, Tensor::from_values({int(buffer->size())}, *buffer));
  }
  return data;
}

void restore_model(Model& model, const CheckpointData& data) {
  for (const NamedParameter& np : model.parameters()) {
    const Tensor& saved = data.tensor(np.name);
    if (saved.shape() != np.param->value.shape())
      throw DimensionError("checkpoint tensor '" + np.name + "' has mismatched shape");
    np.param->value.mutable_values() = saved.values();
  }
}

void restore_optimizer(SgdOptimizer& optimizer, const CheckpointData& data) {
  for (auto& [name, buffer] : optimizer.state()) {
    if (!data.has_tensor(name)) continue;
    const Tensor& saved = data.tensor(name);
    if (saved.values().size() != buffer->size())
      throw DimensionError("checkpoint tensor '" + name + "' has mismatched size");
    *buffer = saved.values();
  }
}

int64_t checkpoint_step(const CheckpointData& data) {
  return int64_t(data.tensor("state.step").values()[0]);
}

float checkpoint_schedule_density(const CheckpointData& data) {
  return data.tensor("state.schedule_density").values()[0];
}

}  // namespace sdconv
