#include "stsopt/error.hpp"

namespace stsopt {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kEmptyCatalog: return "EmptyCatalog";
    case ErrorCode::kMalformedLine: return "MalformedLine";
    case ErrorCode::kDuplicateName: return "DuplicateName";
    case ErrorCode::kUnknownProduct: return "UnknownProduct";
    case ErrorCode::kUnknownField: return "UnknownField";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kNotABijection: return "NotABijection";
    case ErrorCode::kContextOverflow: return "ContextOverflow";
    case ErrorCode::kInvalidLength: return "InvalidLength";
    case ErrorCode::kEmptyCandidatePool: return "EmptyCandidatePool";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kModelLoad: return "ModelLoad";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

}  // namespace stsopt
