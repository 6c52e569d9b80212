#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gsa {

enum class ErrorCode {
  kShape,
  kNonFinite,
  kInvalidArgument,
  kBadMagic,
  kTruncated,
  kCorrupt,
  kVersionMismatch,
  kIo,
  kDegenerate,
  kEmptyCandidates,
  kInsufficientPool,
  kBudget,
  kMissingMask,
  kDivergence,
  kNotFound,
  kConflict,
  kUnprocessable,
  kAborted,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kCorrupt: return "corrupt";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kDegenerate: return "degenerate";
    case ErrorCode::kEmptyCandidates: return "empty_candidates";
    case ErrorCode::kInsufficientPool: return "insufficient_pool";
    case ErrorCode::kBudget: return "budget";
    case ErrorCode::kMissingMask: return "missing_mask";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kConflict: return "conflict";
    case ErrorCode::kUnprocessable: return "unprocessable";
    case ErrorCode::kAborted: return "aborted";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace gsa
