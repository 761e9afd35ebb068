#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace forge {

enum class ErrorKind {
  InvalidArgument,
  InvalidRange,
  ShapeError,
  NumericalError,
  DivergenceError,
  DegenerateLatent,
  InsufficientData,
  UndefinedCorrelation,
  UndefinedMetric,
  UndefinedTest,
  UndefinedTask,
  InvalidRun,
  DegenerateGeometry,
  DegenerateAxis,
  FormatError,
  IoError,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the toolkit carries a kind so callers (the CLI, the
// campaign runner's coverage bookkeeping) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class TypedError : public Error {
 public:
  explicit TypedError(const std::string& what) : Error(K, what) {}
};

using InvalidArgument = TypedError<ErrorKind::InvalidArgument>;
using InvalidRange = TypedError<ErrorKind::InvalidRange>;
using ShapeError = TypedError<ErrorKind::ShapeError>;
using DegenerateLatent = TypedError<ErrorKind::DegenerateLatent>;
using InsufficientData = TypedError<ErrorKind::InsufficientData>;
using UndefinedCorrelation = TypedError<ErrorKind::UndefinedCorrelation>;
using UndefinedMetric = TypedError<ErrorKind::UndefinedMetric>;
using UndefinedTest = TypedError<ErrorKind::UndefinedTest>;
using UndefinedTask = TypedError<ErrorKind::UndefinedTask>;
using InvalidRun = TypedError<ErrorKind::InvalidRun>;
using DegenerateGeometry = TypedError<ErrorKind::DegenerateGeometry>;
using DegenerateAxis = TypedError<ErrorKind::DegenerateAxis>;
using FormatError = TypedError<ErrorKind::FormatError>;
using IoError = TypedError<ErrorKind::IoError>;

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, long iterations = -1);
  long iterations() const noexcept { return iterations_; }

 private:
  long iterations_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step);
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace forge
