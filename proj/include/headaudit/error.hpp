#pragma once

#include <stdexcept>
#include <string>

namespace headaudit {

enum class Errc {
  kInvalidArgument,
  kFormat,             // malformed manifest or blob header
  kTruncated,          // blob shorter than declared
  kNonFinite,          // NaN / Inf in a tensor
  kDimensionMismatch,  // shapes disagree between inputs
  kIo,                 // input file could not be opened or read
  kOutput,             // output file could not be written
  kConfig,             // bad config file or flag combination
  kInfeasible,         // request cannot be satisfied by the data
};

// Single exception type for the library. `code` classifies the failure; the
// message names the offending field, blob, or byte offset.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

  // Errors caused by bad user input (files, flags) rather than by the run.
  bool is_input_error() const noexcept {
    return code_ != Errc::kInfeasible && code_ != Errc::kOutput;
  }

 private:
  Errc code_;
};

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::kInvalidArgument: return "invalid_argument";
    case Errc::kFormat: return "format";
    case Errc::kTruncated: return "truncated";
    case Errc::kNonFinite: return "non_finite";
    case Errc::kDimensionMismatch: return "dimension_mismatch";
    case Errc::kIo: return "io";
    case Errc::kOutput: return "output";
    case Errc::kConfig: return "config";
    case Errc::kInfeasible: return "infeasible";
  }
  return "unknown";
}

}  // namespace headaudit
