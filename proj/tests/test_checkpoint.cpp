#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "sdconv/checkpoint.hpp"
#include "sdconv/error.hpp"
#include "sdconv/layers.hpp"
#include "sdconv/optimizer.hpp"
#include "sdconv/rng.hpp"
#include "sdconv/zoo.hpp"

using namespace sdconv;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("sdconv_ckpt_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("byte-level format golden for a one-tensor checkpoint") {
  TempDir dir("golden");
  CheckpointData data;
  data.tensors.emplace_back("ab", Tensor::from_values({2}, {1.0f, -2.0f}));
  data.config_text = "k=4\n";
  save_checkpoint(dir.file("c.bin"), data);

  std::vector<uint8_t> bytes = slurp(dir.file("c.bin"));
  // magic | version=1 | count=1 | namelen=2 | "ab" | rank=1 | dim=2 | 2 floats | "k=4\n"
  REQUIRE(bytes.size() == 4 + 4 + 4 + 2 + 2 + 1 + 4 + 8 + 4);
  CHECK(std::memcmp(bytes.data(), "SDCV", 4) == 0);
  CHECK(bytes[4] == 1);  // version, little-endian
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 1);  // tensor count
  CHECK(bytes[12] == 2);  // name length
  CHECK(bytes[14] == 'a');
  CHECK(bytes[15] == 'b');
  CHECK(bytes[16] == 1);  // rank
  CHECK(bytes[17] == 2);  // dim 0
  float f0 = 0.0f, f1 = 0.0f;
  std::memcpy(&f0, bytes.data() + 21, 4);
  std::memcpy(&f1, bytes.data() + 25, 4);
  CHECK(f0 == 1.0f);
  CHECK(f1 == -2.0f);
  CHECK(std::string(bytes.begin() + 29, bytes.end()) == "k=4\n");
}

TEST_CASE("round-trip is bit-exact including NaN, infinities, and denormals") {
  TempDir dir("exact");
  float nan_payload = std::numeric_limits<float>::quiet_NaN();
  float denormal = std::numeric_limits<float>::denorm_min();
  CheckpointData data;
  data.tensors.emplace_back(
      "weird", Tensor::from_values({5}, {nan_payload, INFINITY, -INFINITY, denormal, -0.0f}));
  data.tensors.emplace_back("empty_name_ok", Tensor::scalar(3.25f));
  data.config_text = "seed=7\nnote=\xC3\xA9tude\n";  // UTF-8 multibyte survives

  save_checkpoint(dir.file("c.bin"), data);
  CheckpointData loaded = load_checkpoint(dir.file("c.bin"));

  REQUIRE(loaded.tensors.size() == 2);
  CHECK(loaded.version == 1);
  CHECK(loaded.tensors[0].first == "weird");
  const auto& v = loaded.tensors[0].second.values();
  for (size_t i = 0; i < 5; ++i) {
    uint32_t a = 0, b = 0;
    std::memcpy(&a, &data.tensors[0].second.values()[i], 4);
    std::memcpy(&b, &v[i], 4);
    CHECK(a == b);  // bit pattern, not value comparison (NaN != NaN)
  }
  CHECK(loaded.config_text == data.config_text);
  CHECK(loaded.tensor("empty_name_ok").values()[0] == 3.25f);
  CHECK_FALSE(loaded.has_tensor("absent"));
  CHECK_THROWS_AS(loaded.tensor("absent"), DataError);
}

TEST_CASE("malformed checkpoints fail with ingestion errors naming offsets") {
  TempDir dir("bad");

  {
    std::ofstream f(dir.file("magic.bin"), std::ios::binary);
    f.write("XXXX\x01\x00\x00\x00\x00\x00\x00\x00", 12);
  }
  try {
    load_checkpoint(dir.file("magic.bin"));
    FAIL("expected IngestionError");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("byte offset 0") != std::string::npos);
  }

  {
    std::ofstream f(dir.file("version.bin"), std::ios::binary);
    f.write("SDCV\x09\x00\x00\x00\x00\x00\x00\x00", 12);
  }
  CHECK_THROWS_AS(load_checkpoint(dir.file("version.bin")), IngestionError);

  // valid prefix claiming one tensor, then EOF
  {
    std::ofstream f(dir.file("trunc.bin"), std::ios::binary);
    f.write("SDCV\x01\x00\x00\x00\x01\x00\x00\x00", 12);
  }
  try {
    load_checkpoint(dir.file("trunc.bin"));
    FAIL("expected IngestionError");
  } catch (const IngestionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("byte offset 12") != std::string::npos);
    CHECK(msg.find("name length") != std::string::npos);
  }

  // payload cut short: name "w", rank 1, dim 4, but only 3 floats present
  {
    std::ofstream f(dir.file("payload.bin"), std::ios::binary);
    f.write("SDCV\x01\x00\x00\x00\x01\x00\x00\x00", 12);
    f.write("\x01\x00w\x01\x04\x00\x00\x00", 8);
    float three[3] = {1, 2, 3};
    f.write(reinterpret_cast<char*>(three), 12);
  }
  CHECK_THROWS_AS(load_checkpoint(dir.file("payload.bin")), IngestionError);

  CHECK_THROWS_AS(load_checkpoint(dir.file("missing.bin")), DataError);
}

TEST_CASE("model snapshot restores every parameter bit-exactly") {
  TempDir dir("model");
  Rng rng(1234);
  ToyModelConfig cfg;
  Model model = build_toy_model(cfg, rng);

  // capture originals
  std::vector<std::vector<float>> original;
  for (const NamedParameter& np : model.parameters()) original.push_back(np.param->value.values());

  OptimizerConfig ocfg;
  SgdOptimizer opt(model.parameters(), ocfg);
  CheckpointData data = build_checkpoint(model, &opt, 417, 0.7071f, "model=toy\n");
  save_checkpoint(dir.file("m.bin"), data);

  // scramble the live model, then restore from disk
  for (const NamedParameter& np : model.parameters())
    for (auto& v : np.param->value.mutable_values()) v += 3.5f;

  CheckpointData loaded = load_checkpoint(dir.file("m.bin"));
  restore_model(model, loaded);
  size_t idx = 0;
  for (const NamedParameter& np : model.parameters()) {
    CHECK(np.param->value.values() == original[idx]);
    ++idx;
  }
  CHECK(checkpoint_step(loaded) == 417);
  CHECK(checkpoint_schedule_density(loaded) == 0.7071f);
  CHECK(loaded.config_text == "model=toy\n");

  // velocity buffers round-trip through restore_optimizer
  auto state = opt.state();
  REQUIRE_FALSE(state.empty());
  (*state[0].second)[0] = 42.0f;
  CheckpointData data2 = build_checkpoint(model, &opt, 1, 1.0f, "");
  (*state[0].second)[0] = 0.0f;
  restore_optimizer(opt, data2);
  CHECK((*opt.state()[0].second)[0] == 42.0f);
}

TEST_CASE("restore rejects missing tensors and shape mismatches") {
  Rng rng(99);
  ToyModelConfig cfg;
  Model model = build_toy_model(cfg, rng);
  CheckpointData empty;
  CHECK_THROWS_AS(restore_model(model, empty), DataError);

  CheckpointData wrong = build_checkpoint(model, nullptr, 0, 1.0f, "");
  for (auto& [name, tensor] : wrong.tensors)
    if (name == "fc.weight") tensor = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(restore_model(model, wrong), DimensionError);
}

TEST_CASE("oversized tensor names are rejected at save time") {
  TempDir dir("names");
  CheckpointData data;
  data.tensors.emplace_back(std::string(70000, 'x'), Tensor::scalar(1.0f));
  CHECK_THROWS_AS(save_checkpoint(dir.file("n.bin"), data), ContractError);
}
