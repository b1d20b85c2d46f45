#pragma once

#include <stdexcept>
#include <string>

namespace smap {

// Operand shapes disagree. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Aggregation was asked to run over a neighborhood with no cells.
class EmptyNeighborhoodError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An index (token id, map coordinate) falls outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// The sequence would exceed the model's context window.
class ContextOverflowError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace smap
