#pragma once

#include <string>
#include <vector>

#include "sdconv/train.hpp"

namespace sdconv {

/// Range-check every field; ConfigError names the offending key.
void validate(const TrainConfig& cfg);

/// Stable key=value rendering (sorted keys): the effective-config echo and
/// the checkpoint config snapshot. Round-trips through config_from_text.
std::string to_text(const TrainConfig& cfg);

/// Parse a snapshot written by to_text (or any key=value text) starting from
/// defaults. Unknown keys are rejected by name.
TrainConfig config_from_text(const std::string& text);

/**
 * @brief Full config resolution: defaults, then the file at `path` (flat
 *        key=value lines, '#' comments — or a JSON object, possibly nested,
 *        whose paths flatten with dots), then command-line overrides in
 *        order. The result is validated. An empty path skips the file.
 *
 * Errors are ConfigError naming the offending key ("unknown key", type
 * mismatch, or range violation).
 */
TrainConfig parse_train_config(const std::string& path,
                               const std::vector<std::string>& overrides);

/// Apply one "key=value" assignment to an existing config.
void apply_override(TrainConfig& cfg, const std::string& assignment);

/// All recognized keys, sorted (for usage/error text).
std::vector<std::string> config_keys();

}  // namespace sdconv
