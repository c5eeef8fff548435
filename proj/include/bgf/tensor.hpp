#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bgf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array. Layout for feature maps is always N,C,H,W.
template <typename T>
class NdTensor {
 public:
  using value_type = T;

  NdTensor() = default;
  explicit NdTensor(Shape shape, T fill = T(0));
  NdTensor(Shape shape, std::vector<T> data);

  static NdTensor zeros(Shape shape) { return NdTensor(std::move(shape)); }
  static NdTensor ones(Shape shape) { return NdTensor(std::move(shape), T(1)); }
  static NdTensor full(Shape shape, T v) { return NdTensor(std::move(shape), v); }
  static NdTensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi);
  static NdTensor normal(Shape shape, std::mt19937_64& rng, T mean, T stddev);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(std::initializer_list<std::int64_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::int64_t> idx) const { return data_[offset(idx)]; }

  // Same data, new shape with identical element count.
  NdTensor reshaped(Shape shape) const;
  void fill(T v);
  bool all_finite() const;

  template <typename U>
  NdTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return NdTensor<U>(shape_, std::move(out));
  }

 private:
  std::size_t offset(std::initializer_list<std::int64_t> idx) const;

  Shape shape_;
  std::vector<T> data_;
};

void check_same_shape(const Shape& a, const Shape& b, const char* what);

// Largest |a-b| over all elements; shapes must match.
template <typename T>
double max_abs_diff(const NdTensor<T>& a, const NdTensor<T>& b);

}  // namespace bgf
