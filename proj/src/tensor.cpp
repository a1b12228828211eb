// SPDX-License-Identifier: Apache-2.0
#include "fsq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "fsq/error.hpp"

namespace fsq {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
  if (shape_size(shape_) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_string(shape_));
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> data) {
  return Tensor({rows, cols}, std::vector<double>(data));
}

std::size_t Tensor::rows() const {
  if (rank() <= 1) return 1;
  if (rank() == 2) return shape_[0];
  throw ShapeError("rows() requires rank <= 2, got " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
  if (rank() == 0) return 1;
  if (rank() <= 2) return shape_.back();
  throw ShapeError("cols() requires rank <= 2, got " + shape_string(shape_));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size())
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_->begin(), data_->end(), [](double v) { return std::isfinite(v); });
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fsq
