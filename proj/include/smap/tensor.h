#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "smap/errors.h"

namespace smap {

// Dense activations and weight rows are plain float32 buffers.
using Vector = std::vector<float>;

// Row-major float32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

std::string shape_string(std::size_t rows, std::size_t cols);

// result[i] = sum_k m[i,k] * v[k], accumulated in double.
Vector matvec(const Matrix& m, std::span<const float> v);

// Numerically stable softmax (max subtraction, double accumulation).
// Throws EmptyNeighborhoodError on empty input.
std::vector<double> softmax(std::span<const double> scores);
Vector softmax(std::span<const float> scores);

// Cosine similarity in [-1, 1]. A zero-norm operand yields 0.
double cosine_similarity(std::span<const float> a, std::span<const float> b);

// v[i] / sqrt(mean(v^2) + eps) * gain[i]
Vector rms_normalize(std::span<const float> v, std::span<const float> gain, float eps);

// Index of the maximum; ties resolve to the lowest index.
std::size_t argmax(std::span<const float> v);

// Shannon entropy (nats) of a probability vector.
double entropy(std::span<const double> p);

bool all_finite(std::span<const float> v);

}  // namespace smap
