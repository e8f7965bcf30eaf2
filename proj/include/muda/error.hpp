#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace muda {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kNonFinite,
  // linalg
  kNonSquare,
  kNonSymmetric,
  kNoConvergence,
  kAllZero,
  kKOutOfRange,
  // nnet
  kLabelOutOfRange,
  kSupportViolation,
  kNotNormalized,
  kNonScalarLoss,
  kIo,
  kSchemaVersionMismatch,
  kCorruptPayload,
  // datagen
  kInvalidCounts,
  kTargetMissing,
  kEmptyForgetSet,
  kInvalidFraction,
  kDimOutOfRange,
  // unlearn
  kConfigInvalid,
  kMassConcentrated,
  kDegenerateForgetFeatures,
  kDegenerateRetainFeatures,
  // metrics
  kSingleClassTrainingSet,
  kTooFewSamples,
  kDegenerateMask,
  kZeroEntropy,
};

std::string_view to_string(ErrorCode code);

// All library failures surface as this exception; `code()` identifies the
// failure class so callers (and tests) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace muda
