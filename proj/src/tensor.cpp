#include "segcam/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace segcam {

Shape::Shape(std::initializer_list<int> dims)
    : Shape(std::span<const int>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const int> dims) {
  if (dims.empty() || dims.size() > kMaxRank) {
    throw ShapeError("tensor rank must be in [1, 4], got " + std::to_string(dims.size()));
  }
  rank_ = static_cast<int>(dims.size());
  for (int i = 0; i < rank_; ++i) {
    if (dims[i] < 1) {
      throw ShapeError("axis " + std::to_string(i) + " has non-positive extent " +
                       std::to_string(dims[i]));
    }
    dims_[i] = dims[i];
  }
}

std::size_t Shape::numel() const {
  if (rank_ == 0) return 0;
  std::size_t n = 1;
  for (int i = 0; i < rank_; ++i) n *= static_cast<std::size_t>(dims_[i]);
  return n;
}

std::string Shape::to_string() const {
  std::string s = "[";
  for (int i = 0; i < rank_; ++i) {
    if (i) s += ",";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape), data_(shape.numel(), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.to_string());
  }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor(shape, data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T Tensor<T>::max_value() const {
  if (data_.empty()) throw ShapeError("max of empty tensor");
  return *std::max_element(data_.begin(), data_.end());
}

template <typename T>
T Tensor<T>::min_value() const {
  if (data_.empty()) throw ShapeError("min of empty tensor");
  return *std::min_element(data_.begin(), data_.end());
}

template <typename T>
Tensor<T> channel_plane(const Tensor<T>& t, int c) {
  if (t.rank() != 4) throw ShapeError("channel_plane expects rank 4, got " + t.shape().to_string());
  if (c < 0 || c >= t.dim(1)) throw ShapeError("channel index out of range on axis 1");
  const int h = t.dim(2), w = t.dim(3);
  const auto plane = static_cast<std::size_t>(h) * w;
  auto first = t.values().begin() + static_cast<std::ptrdiff_t>(c * plane);
  return Tensor<T>(Shape{h, w}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(plane)));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> channel_plane(const Tensor<float>&, int);
template Tensor<double> channel_plane(const Tensor<double>&, int);

}  // namespace segcam
