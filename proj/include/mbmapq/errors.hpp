#pragma once

#include <stdexcept>
#include <string>

namespace mbmapq {

enum class ErrorKind {
  BadInput,                // file/schema/parameter problems
  GeneratorRowSum,
  NegativeRate,
  ReducibleChain,
  SubstochasticViolation,
  Unstable,
  NoConvergence,
  MassDeficit,
  BudgetExceeded,
  NegativeMass,
  DegenerateService,
  SingularSystem,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::BadInput:               return "BadInput";
    case ErrorKind::GeneratorRowSum:        return "GeneratorRowSum";
    case ErrorKind::NegativeRate:           return "NegativeRate";
    case ErrorKind::ReducibleChain:         return "ReducibleChain";
    case ErrorKind::SubstochasticViolation: return "SubstochasticViolation";
    case ErrorKind::Unstable:               return "Unstable";
    case ErrorKind::NoConvergence:          return "NoConvergence";
    case ErrorKind::MassDeficit:            return "MassDeficit";
    case ErrorKind::BudgetExceeded:         return "BudgetExceeded";
    case ErrorKind::NegativeMass:           return "NegativeMass";
    case ErrorKind::DegenerateService:      return "DegenerateService";
    case ErrorKind::SingularSystem:         return "SingularSystem";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Process exit code contract: 2 validation/input, 3 unstable, 4 numerical failure.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::Unstable:
        return 3;
      case ErrorKind::NoConvergence:
      case ErrorKind::MassDeficit:
      case ErrorKind::BudgetExceeded:
      case ErrorKind::NegativeMass:
        return 4;
      default:
        return 2;
    }
  }

 private:
  ErrorKind kind_;
};

}  // namespace mbmapq
