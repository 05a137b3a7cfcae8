#include "grab/error.hpp"

namespace grab {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kIndex: return "index";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kFreezeViolation: return "freeze_violation";
    case ErrorKind::kSchema: return "schema";
    case ErrorKind::kUndefinedMetric: return "undefined_metric";
  }
  return "unknown";
}

}  // namespace grab
