#include "smap/tensor.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace smap {

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix " + smap::shape_string(rows_, cols_) + " given " +
                     std::to_string(data_.size()) + " entries");
  }
}

std::string Matrix::shape_string() const { return smap::shape_string(rows_, cols_); }

std::string shape_string(std::size_t rows, std::size_t cols) {
  return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
}

Vector matvec(const Matrix& m, std::span<const float> v) {
  if (m.cols() != v.size()) {
    throw ShapeError("matvec: matrix " + m.shape_string() + " vs vector [" +
                     std::to_string(v.size()) + "]");
  }
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    double acc = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      acc += static_cast<double>(row[k]) * static_cast<double>(v[k]);
    }
    out[i] = static_cast<float>(acc);
  }
  return out;
}

std::vector<double> softmax(std::span<const double> scores) {
  if (scores.empty()) throw EmptyNeighborhoodError("softmax: empty input");
  const double hi = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - hi);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

Vector softmax(std::span<const float> scores) {
  std::vector<double> wide(scores.begin(), scores.end());
  const auto p = softmax(std::span<const double>(wide));
  return Vector(p.begin(), p.end());
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: [" + std::to_string(a.size()) + "] vs [" +
                     std::to_string(b.size()) + "]");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

Vector rms_normalize(std::span<const float> v, std::span<const float> gain, float eps) {
  if (v.size() != gain.size()) {
    throw ShapeError("rms_normalize: vector [" + std::to_string(v.size()) + "] vs gain [" +
                     std::to_string(gain.size()) + "]");
  }
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * x;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(v.size()) + eps);
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>(v[i] * inv) * gain[i];
  }
  return out;
}

std::size_t argmax(std::span<const float> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace smap
