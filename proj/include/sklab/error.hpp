#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sk {

enum class ErrorKind {
  kShapeMismatch,
  kNonFinite,
  kInvalidArgument,
  kNotOnTape,
  kIo,
  kFormat,
  kDivergence,
  kInternal,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library. `op()` names the operation or stage
// that rejected its inputs, `kind()` classifies the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string op, const std::string& detail);

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& op() const noexcept { return op_; }

 private:
  ErrorKind kind_;
  std::string op_;
};

}  // namespace sk
