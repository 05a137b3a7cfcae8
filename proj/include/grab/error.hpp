#pragma once

#include <stdexcept>
#include <string>

namespace grab {

// Error taxonomy. The CLI maps kinds onto exit codes: config -> 1,
// io/parse -> 2, everything else -> 3.
enum class ErrorKind {
  kConfig,
  kIo,
  kParse,
  kShape,
  kIndex,
  kContract,
  kFreezeViolation,
  kSchema,
  kUndefinedMetric,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace grab
