// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fsq {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Immutable n-dimensional array of doubles, row-major.
///
/// Storage is shared between copies; a Tensor never changes after
/// construction, so copies are cheap and safe to hand to other threads.
class Tensor {
 public:
  /// Rank-0 tensor holding 0.0.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }

  /// Rank-2 views: rank 0 is 1x1, rank 1 is a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  const double* ptr() const { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  /// Value of a single-element tensor.
  double item() const;

  std::vector<double> to_vector() const { return *data_; }
  Tensor reshaped(Shape shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

/// Same shape and identical bit patterns.
bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace fsq
