#pragma once

#include <stdexcept>
#include <string>

namespace dmlcmr {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition on an argument violated (bad fold count, rho out of range, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Matrix/vector widths do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input table does not carry a column the role mapping asks for.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& column, const std::string& what)
      : Error(what), column_(column) {}
  const std::string& column() const noexcept { return column_; }

 private:
  std::string column_;
};

// A cell could not be parsed as a finite number.
class ParseError : public Error {
 public:
  ParseError(std::size_t row, std::size_t col, const std::string& what)
      : Error(what), row_(row), col_(col) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  std::size_t row_;
  std::size_t col_;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// Estimation failed: degenerate design, divergence, too few rows.
class FitError : public Error {
 public:
  using Error::Error;
};

}  // namespace dmlcmr
