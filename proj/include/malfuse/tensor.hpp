#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace malfuse {

// Base error for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. Rank-2 helpers treat the first axis as
// rows and collapse the remaining axes into columns.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(count(shape), fill);
  }
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != count(shape)) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                       shape_string(shape));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.empty() || shape[0] == 0 ? 0 : data.size() / shape[0]; }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row(std::size_t r) {
    const std::size_t c = cols();
    return {data.data() + r * c, c};
  }
  std::span<const double> row(std::size_t r) const {
    const std::size_t c = cols();
    return {data.data() + r * c, c};
  }

  bool operator==(const Tensor&) const = default;
};

// Copies the listed rows of a rank-2 tensor into a new tensor.
Tensor gather_rows(const Tensor& source, std::span<const std::size_t> rows);

bool all_finite(std::span<const double> values);

}  // namespace malfuse
