#pragma once

#include <stdexcept>
#include <string>

namespace uecrl {

/// Caller supplied a value outside an operation's contract.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parameters or intermediate values became non-finite or otherwise unusable.
class CorruptState : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace uecrl
