#ifndef ALPHACAL_ERROR_HPP
#define ALPHACAL_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace alphacal {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Cholesky factorization hit a non-positive pivot.
class DecompositionError : public Error {
 public:
  DecompositionError(std::size_t pivot, const std::string& what)
      : Error(what), pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

/// A loss, gradient, or fitted parameter became NaN or infinite.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Gradient requested for a node that was never recorded on the tape.
class MissingNodeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input document; `line()` is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace alphacal

#endif  // ALPHACAL_ERROR_HPP
