#include "sklab/error.hpp"

namespace sk {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kNonFinite: return "non_finite";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kNotOnTape: return "not_on_tape";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kInternal: return "internal";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, std::string op, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + " in " + op + ": " + detail),
      kind_(kind),
      op_(std::move(op)) {}

}  // namespace sk
