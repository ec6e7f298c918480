#pragma once

#include <stdexcept>
#include <string>

namespace stsopt {

enum class ErrorCode {
  kEmptyCatalog,
  kMalformedLine,
  kDuplicateName,
  kUnknownProduct,
  kUnknownField,
  kLengthMismatch,
  kNotABijection,
  kContextOverflow,
  kInvalidLength,
  kEmptyCandidatePool,
  kEmptyInput,
  kInvalidConfig,
  kModelLoad,
  kIo,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace stsopt
