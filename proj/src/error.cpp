#include "deformcast/error.hpp"

namespace deformcast {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::RaggedRow: return "RaggedRow";
    case ErrorCode::NonNumeric: return "NonNumeric";
    case ErrorCode::DuplicateCoordinate: return "DuplicateCoordinate";
    case ErrorCode::WindowOutOfRange: return "WindowOutOfRange";
    case ErrorCode::DegenerateExtent: return "DegenerateExtent";
    case ErrorCode::TriangulationFailure: return "TriangulationFailure";
    case ErrorCode::SpecMismatch: return "SpecMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::FeatureCountMismatch: return "FeatureCountMismatch";
    case ErrorCode::ZeroCover: return "ZeroCover";
    case ErrorCode::TooManyFeatures: return "TooManyFeatures";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::FormatError: return "FormatError";
  }
  return "Unknown";
}

}  // namespace deformcast
