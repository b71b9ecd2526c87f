#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdconv/layers.hpp"
#include "sdconv/optimizer.hpp"
#include "sdconv/tensor.hpp"

namespace sdconv {

/**
 * @brief On-disk snapshot of a run. Byte layout (integers little-endian):
 *          magic "SDCV" | u32 version | u32 tensor count |
 *          per tensor: u16 name length | name bytes | u8 rank | rank x u32 dims
 *                      | numel x f32 payload |
 *          config snapshot as UTF-8 text until end of file.
 *
 * Floats are copied bit-for-bit, so load(save(x)) reproduces every tensor
 * exactly, including NaN payloads and denormals. The training step and the
 * pruning-schedule state ride in the tensor table as the scalars
 * "state.step" and "state.schedule_density"; optimizer velocity buffers are
 * "opt.v.<param>" rows.
 */
struct CheckpointData {
  uint32_t version = 1;
  std::vector<std::pair<std::string, Tensor>> tensors;  // insertion order preserved
  std::string config_text;

  /// Lookup by exact name; DataError when absent.
  const Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

/// Snapshot every model parameter (by full name), optimizer velocity, and the
/// run state scalars. `optimizer` may be null for inference-only snapshots.
CheckpointData build_checkpoint(Model& model, SgdOptimizer* optimizer, int64_t step,
                                float schedule_density, const std::string& config_text);

/// Copy parameter tensors back into the model by name. Every model parameter
/// must be present with a matching shape (DataError / DimensionError).
void restore_model(Model& model, const CheckpointData& data);

/// Copy "opt.v.*" rows into the optimizer state; buffers absent from the
/// checkpoint are left at zero.
void restore_optimizer(SgdOptimizer& optimizer, const CheckpointData& data);

int64_t checkpoint_step(const CheckpointData& data);
float checkpoint_schedule_density(const CheckpointData& data);

}  // namespace sdconv
