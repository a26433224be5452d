#pragma once

#include <stdexcept>
#include <string>

namespace h2margin {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Case or profile file could not be parsed, or the data violates an invariant.
/// The message carries the offending field path (e.g. "gen[3].bus").
class CaseError : public Error {
 public:
  using Error::Error;
};

/// An operating point lies outside a generator capability circle.
class InfeasibleOperatingPoint : public Error {
 public:
  using Error::Error;
};

/// Newton or continuation power flow failed to converge.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual, bool singular)
      : Error(what), final_residual(residual), jacobian_singular(singular) {}

  double final_residual;
  bool jacobian_singular;
};

/// Scenario, sweep or solution file is inconsistent with the case.
class ScenarioError : public Error {
 public:
  using Error::Error;
};

}  // namespace h2margin
