#include "adaptime/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "adaptime/error.hpp"

namespace adaptime {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    fail(ErrorKind::kShape, "tensor: shape " + shape_string(shape_) + " needs " +
                                std::to_string(shape_size(shape_)) + " values, got " +
                                std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail(ErrorKind::kShape, "tensor: ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return matrix(r, c, std::move(values));
}

std::size_t Tensor::rows() const noexcept {
  switch (shape_.size()) {
    case 0:
    case 1: return 1;
    default: return shape_[0];
  }
}

std::size_t Tensor::cols() const noexcept {
  switch (shape_.size()) {
    case 0: return 1;
    case 1: return shape_[0];
    default: return shape_[1];
  }
}

double Tensor::item() const {
  if (data_.size() != 1) {
    fail(ErrorKind::kShape, "item: tensor of shape " + shape_string(shape_) + " is not a scalar");
  }
  return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::add_in_place(const Tensor& other) {
  if (other.shape_ != shape_) {
    fail(ErrorKind::kShape, "add_in_place: shape mismatch " + shape_string(shape_) + " vs " +
                                shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

}  // namespace adaptime
