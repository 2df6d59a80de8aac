#pragma once

#include <stdexcept>
#include <string>

namespace protuseg {

/// Raised when a non-finite value shows up in a computation. `where()` names
/// the layer or stage that produced it.
class NumericFault : public std::runtime_error {
 public:
  NumericFault(std::string where, const std::string& what)
      : std::runtime_error(where + ": " + what), where_(std::move(where)) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unsupported file contents (bad magic, unknown version, ...).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace protuseg
