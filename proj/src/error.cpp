// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/error.hpp"

namespace sfpn {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::InvalidPoint: return "InvalidPoint";
    case ErrorCode::DuplicateCoord: return "DuplicateCoord";
    case ErrorCode::StrideViolation: return "StrideViolation";
    case ErrorCode::MissingTargetCoords: return "MissingTargetCoords";
    case ErrorCode::InvalidKernel: return "InvalidKernel";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::TestScaleExceeded: return "TestScaleExceeded";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::EmptyFrame: return "EmptyFrame";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::NoMasks: return "NoMasks";
    case ErrorCode::NormalizationError: return "NormalizationError";
    case ErrorCode::InvalidBox: return "InvalidBox";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::NumericalError: return "NumericalError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace sfpn
