#pragma once

#include <stdexcept>
#include <string>

namespace shiftcai {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: dimension mismatch, bad schema, invalid configuration.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A design matrix does not have full column rank.
class RankDeficientError : public Error {
 public:
  using Error::Error;
};

/// A covariance matrix failed the positive-definiteness check.
class NotPositiveDefiniteError : public Error {
 public:
  NotPositiveDefiniteError(const std::string& what, double smallest_eigenvalue)
      : Error(what), smallest_eigenvalue_(smallest_eigenvalue) {}
  double smallest_eigenvalue() const { return smallest_eigenvalue_; }

 private:
  double smallest_eigenvalue_;
};

/// The response lies in the column space of the design (zero residual).
class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

/// Any other numerical failure (too many rejected resamples, undefined terms).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace shiftcai
