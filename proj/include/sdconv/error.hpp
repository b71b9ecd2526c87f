#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace sdconv {

/**
 * @brief Base error type. Every failure carries a short machine-parsable
 *        category so the CLI can emit a single structured error line.
 */
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

/// Shape or geometry mismatch (named dimensions in the message).
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& message) : Error("dimension", message) {}
};

/// Invalid or conflicting configuration keys/values.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

/// API misuse: an operation was called in a state that cannot honor it.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& message) : Error("contract", message) {}
};

/// Malformed input file; message names the byte offset where parsing failed.
class IngestionError : public Error {
 public:
  explicit IngestionError(const std::string& message) : Error("ingestion", message) {}
};

/// Dataset-level problems (missing files, empty splits, label range).
class DataError : public Error {
 public:
  explicit DataError(const std::string& message) : Error("data", message) {}
};

/// Analysis preconditions not met (no masks to measure, unknown model, ...).
class AnalysisError : public Error {
 public:
  explicit AnalysisError(const std::string& message) : Error("analysis", message) {}
};

/// Non-finite values where finite ones are required (NaN loss abort).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

}  // namespace sdconv
