#pragma once

#include <stdexcept>
#include <string>

namespace shev {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class FormatError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class UsageError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };

class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& what, long stranded_index)
      : Error(what), stranded_index_(stranded_index) {}
  // First time index from which no feasible continuation exists (-1 if unknown).
  long stranded_index() const { return stranded_index_; }

 private:
  long stranded_index_;
};

}  // namespace shev
