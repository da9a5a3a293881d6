#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace attrdisc {

enum class ErrorKind {
  kParse,
  kDuplicateId,
  kUnknownSplit,
  kUnknownId,
  kUnknownWord,
  kInvalidArgument,
  kFormat,
  kLengthMismatch,
  kNonFinite,
  kOutOfRange,
  kNumerical,
  kMissingInput,
  kStageDependency,
  kIo,
};

std::string_view to_string(ErrorKind kind);

// All library failures are reported through this one exception type; the
// kind lets callers (and tests) branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace attrdisc
