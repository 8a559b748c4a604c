#pragma once

#include <stdexcept>
#include <string>

namespace rwseg {

/// Malformed or inconsistent input data (files, JSON documents, sizes).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative or direct solver could not produce a solution.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rwseg
