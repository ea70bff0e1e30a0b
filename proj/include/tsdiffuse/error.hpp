// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tsdiffuse {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value; the message names the offending key or bound.
struct ConfigError : Error {
  using Error::Error;
};

// Shape or length contract violated by the caller.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf in inputs, weights or the training loss.
struct NumericError : Error {
  using Error::Error;
};

// Malformed file contents (corpus lines, checkpoints, configs).
struct FormatError : Error {
  using Error::Error;
};

struct IncompatibleVersionError : FormatError {
  using FormatError::FormatError;
};

// Failure talking to an external captioning provider.
struct CaptionError : Error {
  CaptionError(const std::string& what, bool retryable_) : Error(what), retryable(retryable_) {}
  bool retryable;
};

}  // namespace tsdiffuse
