#ifndef SHOPT_COMMON_HPP
#define SHOPT_COMMON_HPP

#include <stdexcept>
#include <string>

namespace shopt {

// One knob for every PSD / eigenvalue-clamp decision in the library.
inline constexpr double kPsdRelTol = 1e-9;

// Numerical rank tolerance for condition-number computations.
inline constexpr double kRankRelTol = 1e-10;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or column-count mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite input or eigensolver failure.
class NumericError : public Error {
 public:
  using Error::Error;
};

class NotPsdError : public Error {
 public:
  using Error::Error;
};

// Singular preconditioner, floored-out inverse, or degenerate rank-one update.
class SingularError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public Error {
 public:
  using Error::Error;
};

class InvalidRidgeError : public Error {
 public:
  using Error::Error;
};

// Epoch bookkeeping misuse: overflow, premature seal, bad index.
class EpochError : public Error {
 public:
  using Error::Error;
};

// Gradient-history column cap reached.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class GateExhaustedError : public Error {
 public:
  GateExhaustedError(const std::string& what, double best_sigma, int attempts)
      : Error(what), best_sigma(best_sigma), attempts(attempts) {}
  double best_sigma;
  int attempts;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InsufficientSamplesError : public Error {
 public:
  using Error::Error;
};

}  // namespace shopt

#endif  // SHOPT_COMMON_HPP
