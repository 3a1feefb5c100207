#pragma once

#include <stdexcept>
#include <string>

namespace jstts {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

// Thrown when a checkpoint or run directory is not in the state a command needs.
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace jstts
