#ifndef ISSLAB_ERRORS_HPP
#define ISSLAB_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace isslab {

/// Argument outside the mathematical domain of an operation (negative radius,
/// non-Hurwitz matrix, gain outside the stabilizing set, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A point left the open constraint set; callers treat this as omega = +inf.
class DomainExitError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Caller violated a documented precondition on a curve, size function or system.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A sampler could not populate a required sublevel set.
class CoverageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sampled evidence that a claimed global minimum is not one.
class MinimumViolationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear algebra or integration failed to converge / produced a large residual.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StabilizabilityError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Malformed experiment configuration; the message names the offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace isslab

#endif  // ISSLAB_ERRORS_HPP
