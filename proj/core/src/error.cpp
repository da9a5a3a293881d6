#include "attrdisc/error.hpp"

namespace attrdisc {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kDuplicateId: return "duplicate id";
    case ErrorKind::kUnknownSplit: return "unknown split";
    case ErrorKind::kUnknownId: return "unknown id";
    case ErrorKind::kUnknownWord: return "unknown word";
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kLengthMismatch: return "length mismatch";
    case ErrorKind::kNonFinite: return "non-finite value";
    case ErrorKind::kOutOfRange: return "out of range";
    case ErrorKind::kNumerical: return "numerical error";
    case ErrorKind::kMissingInput: return "missing input";
    case ErrorKind::kStageDependency: return "stage dependency";
    case ErrorKind::kIo: return "i/o error";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace attrdisc
