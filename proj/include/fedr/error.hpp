#pragma once

#include <stdexcept>
#include <string>

namespace fedr {

// Base of every error thrown by the library. Callers that only care about
// "something went wrong in estimation" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& msg, long row)
      : Error("row " + std::to_string(row) + ": " + msg), row_(row) {}
  long row() const noexcept { return row_; }

 private:
  long row_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// The binarized outcome is constant over the whole panel at a threshold.
class DegenerateThresholdError : public Error {
 public:
  DegenerateThresholdError(const std::string& msg, double y) : Error(msg), y_(y) {}
  double threshold() const noexcept { return y_; }

 private:
  double y_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& msg, int iterations, double grad_norm)
      : Error(msg + " (iterations=" + std::to_string(iterations) +
              ", gradient sup-norm=" + std::to_string(grad_norm) + ")"),
        iterations_(iterations),
        grad_norm_(grad_norm) {}
  int iterations() const noexcept { return iterations_; }
  double grad_norm() const noexcept { return grad_norm_; }

 private:
  int iterations_;
  double grad_norm_;
};

// A weighted two-way system is singular beyond the known location direction.
class SingularSystemError : public Error {
 public:
  using Error::Error;
};

class InferenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedr
