#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace deformcast {

enum class ErrorCode {
  MissingColumn,
  RaggedRow,
  NonNumeric,
  DuplicateCoordinate,
  WindowOutOfRange,
  DegenerateExtent,
  TriangulationFailure,
  SpecMismatch,
  EmptyInput,
  ShapeMismatch,
  NonFiniteLoss,
  FeatureCountMismatch,
  ZeroCover,
  TooManyFeatures,
  IndexOutOfRange,
  LengthMismatch,
  ZeroVariance,
  IoError,
  InvalidConfig,
  FormatError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the toolkit carries one of the codes above so
/// callers (and tests) can dispatch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace deformcast
