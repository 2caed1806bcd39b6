#pragma once

#include <stdexcept>
#include <string>

namespace chemcpa {

// Broad failure categories. The C API maps each onto a status code and the
// CLI maps them onto exit codes, so new kinds must be added in all three.
enum class ErrorKind {
  kInvalidArgument,
  kDimensionMismatch,
  kNonFinite,
  kStaleTape,
  kParse,
  kData,
  kIo,
  kState,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& what)
      : std::runtime_error(code + ": " + what), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const noexcept { return kind_; }
  // Short machine-readable name, e.g. "NoControls" or "UnclosedRing".
  const std::string& code() const noexcept { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

inline Error DimensionMismatch(const std::string& what) {
  return Error(ErrorKind::kDimensionMismatch, "DimensionMismatch", what);
}

inline Error DataError(std::string code, const std::string& what) {
  return Error(ErrorKind::kData, std::move(code), what);
}

inline Error InvalidArgument(std::string code, const std::string& what) {
  return Error(ErrorKind::kInvalidArgument, std::move(code), what);
}

}  // namespace chemcpa
