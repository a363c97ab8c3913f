#pragma once

#include <stdexcept>
#include <string>

namespace mmfa {

// Base class for every error raised by the library. Callers that only care
// about "did the library reject this" can catch mmfa::Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on argument values was violated (non-orthonormal rotation,
// non-positive scale, alpha outside [0, 1], ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Tensor shapes disagree with each other or with the configured model.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A pluggable provider (pose, landmarks) cannot serve the request.
class ProviderError : public Error {
 public:
  using Error::Error;
};

// Unreadable, corrupt or version-mismatched checkpoint.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Dataset ingestion problems: empty directory, unreadable frame, ...
class DatasetError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmfa
