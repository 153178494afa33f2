#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace adaptime {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles. Rank 0 is a scalar, rank 1 a vector and
// rank 2 a matrix; higher ranks are storable but no op consumes them.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  // Rank <= 2 views: a vector is one row, a scalar is 1x1.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;
  void fill(double value);
  bool all_finite() const noexcept;

  // In-place this += other (same shape required).
  void add_in_place(const Tensor& other);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace adaptime
