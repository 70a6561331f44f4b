#include "malfuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace malfuse {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor gather_rows(const Tensor& source, std::span<const std::size_t> rows) {
  const std::size_t c = source.cols();
  Tensor out = Tensor::matrix(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= source.rows()) throw ShapeError("gather_rows: row index out of range");
    std::memcpy(out.data.data() + i * c, source.data.data() + rows[i] * c, c * sizeof(double));
  }
  return out;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace malfuse
