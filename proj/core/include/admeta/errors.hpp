#pragma once

#include <stdexcept>
#include <string>

namespace admeta {

// Failure taxonomy. The CLI maps categories onto process exit codes, so
// every throw site picks the category deliberately.
enum class ErrorCategory {
  schema,          // malformed input file or configuration
  dimension,       // mismatched vector/matrix dimensions
  domain,          // non-finite or out-of-range value
  singular,        // rank-deficient design or ill-conditioned system
  separation,      // logistic likelihood has no interior maximum
  convergence,     // iteration cap hit or diverging solver
  overlap,         // weight solver driven to an unbounded tilt
  boundary,        // aggregate outcome mean at 0 or 1
  missing_moment,  // AD summary lacks a requested moment target
  size,            // too few rows for the requested reconstruction
  incompatible,    // reconstructed covariance not PSD after flooring
  internal
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::schema: return "schema";
    case ErrorCategory::dimension: return "dimension";
    case ErrorCategory::domain: return "domain";
    case ErrorCategory::singular: return "singular";
    case ErrorCategory::separation: return "separation";
    case ErrorCategory::convergence: return "convergence";
    case ErrorCategory::overlap: return "overlap";
    case ErrorCategory::boundary: return "boundary";
    case ErrorCategory::missing_moment: return "missing-moment";
    case ErrorCategory::size: return "size";
    case ErrorCategory::incompatible: return "incompatible";
    case ErrorCategory::internal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& what)
      : std::runtime_error(what), cat_(cat) {}
  ErrorCategory category() const noexcept { return cat_; }

 private:
  ErrorCategory cat_;
};

[[noreturn]] inline void fail(ErrorCategory cat, const std::string& msg) {
  throw Error(cat, msg);
}

}  // namespace admeta
