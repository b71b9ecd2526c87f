#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdconv/rng.hpp"
#include "sdconv/tensor.hpp"

namespace sdconv {

/// Per-channel affine normalization constants applied after [0,1] scaling.
struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;
};

/// Constants for a dataset id ("mnist" or "cifar10"). Unknown id -> ConfigError.
Normalization dataset_normalization(const std::string& id);

enum class Split { kTrain, kTest };

/**
 * @brief An in-memory split: images already scaled to [0,1] and per-channel
 *        normalized, stored sample-major in [count, channels, height, width]
 *        order. Loading the same files twice yields identical buffers.
 */
struct Dataset {
  std::string id;
  int channels = 0;
  int height = 0;
  int width = 0;
  int64_t count = 0;
  std::vector<float> images;
  std::vector<int> labels;

  /// Stack the named samples into a [n, c, h, w] batch, preserving order.
  Tensor gather(const std::vector<int64_t>& indices) const;

  /// Single sample as a [1, c, h, w] batch.
  Tensor sample(int64_t index) const;
};

// ---- low-level parsers (exposed for targeted format tests) ---------------------

/// Raw ubyte image stack from an IDX3 file (magic 0x00000803).
struct RawImages {
  int64_t count = 0;
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> pixels;  // count * rows * cols bytes
};

/// Raw label bytes from an IDX1 file (magic 0x00000801); values range-checked 0..9.
RawImages parse_idx_images(const std::string& path);
std::vector<uint8_t> parse_idx_labels(const std::string& path);

/// One binary batch file: records of 1 label byte + 3072 channel-major pixels.
struct RawCifar {
  int64_t count = 0;
  std::vector<uint8_t> labels;
  std::vector<uint8_t> pixels;  // count * 3072 bytes
};
RawCifar parse_cifar_file(const std::string& path);

// ---- loading -------------------------------------------------------------------

/**
 * @brief Load one split from `root` using the conventional file names
 *        (train-images-idx3-ubyte / t10k-... for MNIST, data_batch_*.bin /
 *        test_batch.bin for CIFAR-10). Pixels are scaled to [0,1] and
 *        normalized with the dataset constants.
 *
 * Missing files -> DataError; malformed content -> IngestionError naming the
 * byte offset; image/label count mismatch -> DataError.
 */
Dataset load_dataset(const std::string& id, const std::string& root, Split split);

// ---- synthetic stand-ins ---------------------------------------------------------

/**
 * @brief Write a synthetic-but-format-genuine dataset into `root`. Each class
 *        is a fixed prototype (a deterministic mixture of intensity blobs);
 *        samples jitter the prototype by a small shift, amplitude scaling,
 *        and pixel noise, so the classes are cleanly learnable while still
 *        exercising a real training loop. Files are byte-for-byte
 *        reproducible for a given seed.
 */
void write_synthetic_mnist(const std::string& root, uint64_t seed,
                           int64_t train_count = 60000, int64_t test_count = 10000);
void write_synthetic_cifar10(const std::string& root, uint64_t seed,
                             int64_t train_count = 50000, int64_t test_count = 10000);

/// Generate the files for `id` under `root` if any are missing.
/// Returns true when files were (re)generated.
bool ensure_dataset(const std::string& id, const std::string& root, uint64_t seed);

// ---- batch transforms -------------------------------------------------------------

/**
 * @brief Random horizontal flip + zero-pad-4 random crop, per sample, in
 *        normalized space. Draw order per sample: flip coin, then row offset,
 *        then column offset (offsets in [0, 8]).
 */
Tensor augment_flip_pad_crop(const Tensor& batch, RngStream& stream);

/// Add i.i.d. Gaussian noise to a normalized batch. sigma == 0 returns the
/// input handle untouched (bit-identical path, no RNG draws).
Tensor with_gaussian_noise(const Tensor& batch, float sigma, RngStream& stream);

}  // namespace sdconv
