#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fewshot/errors.hpp"

namespace fewshot {

inline std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor. The element type doubles as the dtype: training
// code instantiates float, gradient-verification code instantiates double.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), T(0)) {}

  Tensor(std::vector<size_t> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_))
      throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor({}, {v}); }

  static Tensor full(std::vector<size_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t numel() const { return data_.size(); }
  size_t dim(size_t axis) const {
    if (axis >= shape_.size()) throw DimensionError("axis out of range");
    return shape_[axis];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Multi-index access for tests and small utilities; hot loops index flat.
  T& at(std::initializer_list<size_t> idx) { return data_[flat_index(idx)]; }
  const T& at(std::initializer_list<size_t> idx) const {
    return data_[const_cast<Tensor*>(this)->flat_index(idx)];
  }

  Tensor reshaped(std::vector<size_t> new_shape) const {
    if (count(new_shape) != numel())
      throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                           " changes element count");
    return Tensor(std::move(new_shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  static size_t count(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
  }

 private:
  size_t flat_index(std::initializer_list<size_t> idx) {
    if (idx.size() != shape_.size()) throw DimensionError("index rank mismatch");
    size_t flat = 0;
    size_t axis = 0;
    for (size_t i : idx) {
      if (i >= shape_[axis]) throw DimensionError("index out of bounds");
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  std::vector<size_t> shape_;
  std::vector<T> data_;
};

}  // namespace fewshot
