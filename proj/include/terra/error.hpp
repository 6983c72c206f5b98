#pragma once

#include <stdexcept>
#include <string>

namespace terra {

/// Base of every error raised by the library. `exit_code()` is the process
/// status the command-line tool reports for it.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 1)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what, 2) {}
};

/// NaN/Inf encountered in a computation, or a non-finite training loss.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, 3) {}
};

/// Nothing to work with: no valid cells, no in-extent points, no samples.
class EmptyInputError : public Error {
 public:
  explicit EmptyInputError(const std::string& what) : Error(what, 4) {}
};

class GeometryError : public Error {
 public:
  explicit GeometryError(const std::string& what) : Error(what, 5) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, long line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

}  // namespace terra
