#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bgf/autograd.hpp"

// Differentiable ops over Graph nodes. All feature maps are N,C,H,W.
namespace bgf::ops {

struct Conv2dOptions {
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
  std::int64_t groups = 1;

  static Conv2dOptions square(std::int64_t stride, std::int64_t padding, std::int64_t groups = 1) {
    return {stride, stride, padding, padding, groups};
  }
};

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::optional<Var<T>> bias, const Conv2dOptions& opt);
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::optional<Var<T>> bias, std::int64_t stride, std::int64_t padding,
              std::int64_t groups = 1) {
  return conv2d(input, weight, bias, Conv2dOptions::square(stride, padding, groups));
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x);
// Padding cells never win the max; gradient goes to the first maximum in
// row-major window order.
template <typename T>
Var<T> max_pool2d(Var<T> x, std::int64_t kernel, std::int64_t stride, std::int64_t padding);

template <typename T>
Var<T> softmax(Var<T> x, std::int64_t axis);

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
// x[..., K] * w[K, N] (+ b[N]).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b);
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return linear(x, w, std::optional<Var<T>>(b));
}
template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  return linear(x, w, std::optional<Var<T>>());
}

template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> silu(Var<T> x);
template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> hardswish(Var<T> x);

// Elementwise with broadcasting: equal rank, each extent equal or 1.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> x, T factor);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::int64_t axis);
template <typename T>
std::vector<Var<T>> split(Var<T> x, std::int64_t axis, const std::vector<std::int64_t>& sizes);

template <typename T>
Var<T> mean(Var<T> x, std::int64_t axis, bool keepdim = true);
template <typename T>
Var<T> max_reduce(Var<T> x, std::int64_t axis, bool keepdim = true);
// Sum of all elements, shape [1].
template <typename T>
Var<T> sum(Var<T> x);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);
template <typename T>
Var<T> permute(Var<T> x, const std::vector<std::int64_t>& perm);
template <typename T>
Var<T> transpose(Var<T> x, std::int64_t a, std::int64_t b);

template <typename T>
struct BatchNormBuffers {
  NdTensor<T> running_mean;
  NdTensor<T> running_var;
};

struct BatchNormOptions {
  double eps = 1e-3;
  double momentum = 0.03;
};

// Batch statistics (and a running-stat update) when the graph is training,
// running statistics otherwise.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormBuffers<T>& buffers, const BatchNormOptions& opt);

// x[N, R, T, C] -> out[N, R, k*T, C], concatenating for each (n, r) the k
// blocks x[n, index[(n*R + r)*k + j]].
template <typename T>
Var<T> gather_blocks(Var<T> x, std::span<const std::int32_t> index, std::int64_t k);

}  // namespace bgf::ops
