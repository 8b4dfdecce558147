#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace normgame {

/// Malformed input file row. Carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A value outside the mathematical domain of an operation (negative weight,
/// CES argument <= 0, q outside (0,1), ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Rank deficiency in a least-squares or IV cross-product.
class RankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation not defined for the requested aggregator family.
class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-isolate row whose influence weights are all zero.
class DegenerateRowError : public std::runtime_error {
 public:
  DegenerateRowError(std::size_t node, const std::string& what)
      : std::runtime_error(what), node_(node) {}
  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

}  // namespace normgame
