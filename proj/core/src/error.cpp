#include "forge/error.hpp"

namespace forge {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::InvalidRange: return "InvalidRange";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::NumericalError: return "NumericalError";
    case ErrorKind::DivergenceError: return "DivergenceError";
    case ErrorKind::DegenerateLatent: return "DegenerateLatent";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::UndefinedCorrelation: return "UndefinedCorrelation";
    case ErrorKind::UndefinedMetric: return "UndefinedMetric";
    case ErrorKind::UndefinedTest: return "UndefinedTest";
    case ErrorKind::UndefinedTask: return "UndefinedTask";
    case ErrorKind::InvalidRun: return "InvalidRun";
    case ErrorKind::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorKind::DegenerateAxis: return "DegenerateAxis";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

NumericalError::NumericalError(const std::string& what, long iterations)
    : Error(ErrorKind::NumericalError,
            iterations >= 0 ? what + " (after " + std::to_string(iterations) + " iterations)"
                            : what),
      iterations_(iterations) {}

DivergenceError::DivergenceError(const std::string& what, long step)
    : Error(ErrorKind::DivergenceError, what + " at step " + std::to_string(step)),
      step_(step) {}

}  // namespace forge
