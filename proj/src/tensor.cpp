#include "qcaps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qcaps/error.hpp"

namespace qcaps {

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const Index ea = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const Index eb = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeMismatch("ShapeMismatch: cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

int normalize_axis(int axis, int ndim) {
  const int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim) {
    throw ShapeMismatch("ShapeMismatch: axis " + std::to_string(axis) + " out of range for rank " +
                        std::to_string(ndim));
  }
  return a;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  for (Index e : shape_) {
    if (e < 1) throw ShapeMismatch("ShapeMismatch: non-positive extent in " + shape_string(shape_));
  }
  data_.assign(static_cast<std::size_t>(shape_size(shape_)), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (Index e : shape_) {
    if (e < 1) throw ShapeMismatch("ShapeMismatch: non-positive extent in " + shape_string(shape_));
  }
  if (static_cast<Index>(data_.size()) != shape_size(shape_)) {
    throw ShapeMismatch("ShapeMismatch: " + std::to_string(data_.size()) + " values for shape " +
                        shape_string(shape_));
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::vector(std::initializer_list<Scalar> values) {
  return Tensor(Shape{static_cast<Index>(values.size())}, std::vector<Scalar>(values));
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  return shape_[static_cast<std::size_t>(normalize_axis(axis, ndim()))];
}

template <typename Scalar>
Index Tensor<Scalar>::flat_index(std::initializer_list<Index> idx) const {
  if (static_cast<int>(idx.size()) != ndim()) {
    throw ShapeMismatch("ShapeMismatch: index rank " + std::to_string(idx.size()) + " for shape " +
                        shape_string(shape_));
  }
  Index flat = 0;
  std::size_t k = 0;
  for (Index i : idx) flat = flat * shape_[k++] + i;
  return flat;
}

template <typename Scalar>
Scalar& Tensor<Scalar>::at(std::initializer_list<Index> idx) {
  return data_[static_cast<std::size_t>(flat_index(idx))];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> idx) const {
  return data_[static_cast<std::size_t>(flat_index(idx))];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (data_.size() != 1) throw ShapeMismatch("ShapeMismatch: item() on shape " + shape_string(shape_));
  return data_[0];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeMismatch("ShapeMismatch: reshape " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename Scalar>
void Tensor<Scalar>::fill(Scalar v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch("ShapeMismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Scalar m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace qcaps
