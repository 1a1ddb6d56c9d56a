#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tent/errors.hpp"

namespace tent {

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Dense n-dimensional array of 64-bit floats in row-major order. Rank 0 is
// a scalar holding one value. Tensors are plain values: no operation below
// mutates its inputs, so they are safe to share across threads.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);

  std::size_t rank() const { return shape_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }

  double& operator()(std::size_t i) {
    assert(rank() == 1 && i < shape_[0]);
    return data_[i];
  }
  double operator()(std::size_t i) const {
    assert(rank() == 1 && i < shape_[0]);
    return data_[i];
  }
  double& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    assert(rank() == 4);
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    assert(rank() == 4);
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// ---- element-wise and structural operations ----

// Matrix product of an MxN and an NxP matrix. Accumulation runs left to
// right along the inner dimension, so results are reproducible bit for bit.
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stable softmax of a rank-1 tensor (max subtraction).
Tensor softmax(const Tensor& v);

// Softmax kernel over a raw lane; shared by softmax() and the attention ops.
void softmax_lane(const double* in, double* out, std::size_t n);

// Sums along one axis; the result drops that axis (rank decreases by one).
Tensor sum_axis(const Tensor& t, std::size_t axis);

// Element-wise product where s's shape is a prefix of v's shape; s is
// replicated along v's trailing axes.
Tensor hadamard_broadcast(const Tensor& s, const Tensor& v);

// Concatenates tensors along the last axis. All other extents must agree.
Tensor concat_last(const std::vector<Tensor>& parts);

// Slice [start, start+len) of the last axis.
Tensor slice_last(const Tensor& t, std::size_t start, std::size_t len);

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& t, double factor);
Tensor reshape(const Tensor& t, std::vector<std::size_t> shape);

bool all_finite(const Tensor& t);

}  // namespace tent
