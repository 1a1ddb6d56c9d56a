#include "tent/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace tent {

namespace {

std::size_t checked_element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
    }
    n *= e;
  }
  return n;
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_element_count(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (checked_element_count(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data_[0] = v;
  return t;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(shape_));
  }
  return shape_[axis];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects two matrices, got " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), n = a.extent(1), p = b.extent(1);
  if (b.extent(0) != n) {
    throw ShapeError("matmul inner extents differ: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  Tensor out({m, p});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        acc += a(i, k) * b(k, j);
      }
      out(i, j) = acc;
    }
  }
  return out;
}

void softmax_lane(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t i = 1; i < n; ++i) {
    mx = std::max(mx, in[i]);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    out[i] /= sum;
  }
}

Tensor softmax(const Tensor& v) {
  if (v.rank() != 1 || v.size() == 0) {
    throw ShapeError("softmax expects a non-empty vector, got " + shape_to_string(v.shape()));
  }
  Tensor out({v.size()});
  softmax_lane(v.data(), out.data(), v.size());
  return out;
}

Tensor sum_axis(const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) {
    throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(t.shape()));
  }
  std::vector<std::size_t> out_shape;
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i != axis) out_shape.push_back(t.shape()[i]);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.shape()[i];
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.shape()[i];
  const std::size_t ext = t.shape()[axis];

  Tensor out(std::move(out_shape));
  const double* src = t.data();
  double* dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::size_t a = 0; a < ext; ++a) {
        acc += src[(o * ext + a) * inner + i];
      }
      dst[o * inner + i] = acc;
    }
  }
  return out;
}

Tensor hadamard_broadcast(const Tensor& s, const Tensor& v) {
  if (s.rank() > v.rank()) {
    throw ShapeError("hadamard_broadcast: " + shape_to_string(s.shape()) +
                     " has higher rank than " + shape_to_string(v.shape()));
  }
  for (std::size_t i = 0; i < s.rank(); ++i) {
    if (s.shape()[i] != v.shape()[i]) {
      throw ShapeError("hadamard_broadcast: " + shape_to_string(s.shape()) +
                       " is not a prefix of " + shape_to_string(v.shape()));
    }
  }
  std::size_t tail = 1;
  for (std::size_t i = s.rank(); i < v.rank(); ++i) tail *= v.shape()[i];

  Tensor out(v.shape());
  const double* sv = s.data();
  const double* vv = v.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < tail; ++j) {
      ov[i * tail + j] = sv[i] * vv[i * tail + j];
    }
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) {
    throw ShapeError("concat_last: no parts given");
  }
  const Tensor& first = parts.front();
  if (first.rank() == 0) {
    throw ShapeError("concat_last: parts must have rank >= 1");
  }
  std::size_t last_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank()) {
      throw ShapeError("concat_last: rank mismatch, " + shape_to_string(first.shape()) +
                       " vs " + shape_to_string(p.shape()));
    }
    for (std::size_t i = 0; i + 1 < p.rank(); ++i) {
      if (p.shape()[i] != first.shape()[i]) {
        throw ShapeError("concat_last: leading extents differ, " +
                         shape_to_string(first.shape()) + " vs " + shape_to_string(p.shape()));
      }
    }
    last_total += p.shape().back();
  }
  std::vector<std::size_t> out_shape = first.shape();
  out_shape.back() = last_total;
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < first.rank(); ++i) rows *= first.shape()[i];

  Tensor out(std::move(out_shape));
  double* dst = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
      const std::size_t w = p.shape().back();
      const double* src = p.data() + r * w;
      std::copy(src, src + w, dst + r * last_total + offset);
      offset += w;
    }
  }
  return out;
}

Tensor slice_last(const Tensor& t, std::size_t start, std::size_t len) {
  if (t.rank() == 0) {
    throw ShapeError("slice_last: tensor must have rank >= 1");
  }
  const std::size_t w = t.shape().back();
  if (start + len > w || len == 0) {
    throw ShapeError("slice_last: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") invalid for extent " + std::to_string(w));
  }
  std::vector<std::size_t> out_shape = t.shape();
  out_shape.back() = len;
  std::size_t rows = t.size() / w;
  Tensor out(std::move(out_shape));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = t.data() + r * w + start;
    std::copy(src, src + len, out.data() + r * len);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: shape mismatch, " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("subtract: shape mismatch, " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Tensor scaled(const Tensor& t, double factor) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] * factor;
  return out;
}

Tensor reshape(const Tensor& t, std::vector<std::size_t> shape) {
  Tensor out(std::move(shape), std::vector<double>(t.values().begin(), t.values().end()));
  return out;
}

bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace tent
