#include "distillforge/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace distillforge {

std::size_t shape_numel(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (auto extent : shape_) {
    require(extent > 0, ErrorKind::dimension, "tensor extents must be positive, got " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : Tensor(Adopt{}, std::move(shape), {data.begin(), data.end()}) {}

template <typename T>
Tensor<T>::Tensor(Adopt, Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto extent : shape_) {
    require(extent > 0, ErrorKind::dimension, "tensor extents must be positive, got " + shape_str(shape_));
  }
  require(shape_numel(shape_) == data_.size(), ErrorKind::dimension,
          "shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) + " values");
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  require(axis < shape_.size(), ErrorKind::dimension,
          "axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  return shape_[axis];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(Adopt{}, std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(Adopt{}, std::move(shape), std::move(data_));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
T Tensor<T>::item() const {
  require(data_.size() == 1, ErrorKind::dimension, "item() needs a single-element tensor, got " + shape_str(shape_));
  return data_[0];
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace distillforge
