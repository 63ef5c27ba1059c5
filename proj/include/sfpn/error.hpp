// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sfpn {

enum class ErrorCode {
  EmptyCloud,
  InvalidPoint,
  DuplicateCoord,
  StrideViolation,
  MissingTargetCoords,
  InvalidKernel,
  ShapeError,
  TestScaleExceeded,
  ConfigError,
  EmptyFrame,
  RangeError,
  NoMasks,
  NormalizationError,
  InvalidBox,
  EmptyBatch,
  ZeroVector,
  NumericalError,
  IoError,
  FormatError,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-checkable error kind. All library
/// precondition failures are reported through this type.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace sfpn
