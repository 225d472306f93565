#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace segcam {

/// Raised when tensor extents do not fit an operation. The message names the
/// offending axis.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Up to four extents in batch, channels, height, width order. Lower-rank
/// shapes use the leading axes.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::span<const int> dims);

  int rank() const { return rank_; }
  int operator[](int axis) const { return dims_.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const;
  std::vector<int> to_vector() const { return {dims_.begin(), dims_.begin() + rank_}; }
  std::string to_string() const;

  bool operator==(const Shape& other) const = default;

 private:
  std::array<int, kMaxRank> dims_{};
  int rank_ = 0;
};

/// Dense row-major tensor. `float` is the working precision; `double` exists
/// for gradient checking.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  int dim(int axis) const { return shape_[axis]; }
  int rank() const { return shape_.rank(); }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-4 element access (n, c, h, w).
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }
  // Rank-2 element access (row, col).
  T& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  const T& at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;
  T max_value() const;
  T min_value() const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  std::vector<To> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<To>(src[i]);
  return Tensor<To>(src.shape(), std::move(out));
}

/// Channel `c` of batch item 0 of a rank-4 tensor as a rank-2 [H, W] tensor.
template <typename T>
Tensor<T> channel_plane(const Tensor<T>& t, int c);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace segcam
