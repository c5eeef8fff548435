#pragma once

#include <cstdint>

// Hot loops behind the differentiable ops. Every kernel exists twice: a
// serial reference in `kernels::reference`, written as the textbook loop nest,
// and an OpenMP version in `kernels` that the graph ops call. Tests pin the two
// together; bench/bench_kernels.cpp compares their speed.
namespace bgf::kernels {

struct ConvGeometry {
  std::int64_t batch = 1;
  std::int64_t in_channels = 1;
  std::int64_t in_h = 1;
  std::int64_t in_w = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
  std::int64_t groups = 1;

  std::int64_t out_h() const { return (in_h + 2 * pad_h - kernel_h) / stride_h + 1; }
  std::int64_t out_w() const { return (in_w + 2 * pad_w - kernel_w) / stride_w + 1; }
  std::int64_t in_per_group() const { return in_channels / groups; }
  std::int64_t out_per_group() const { return out_channels / groups; }
  // Throws ShapeError on non-divisible groups or empty output.
  void validate() const;
};

// C[M,N] = op(A) * op(B) (+ C when accumulate). op(A) is A[M,K] or, with
// trans_a, A stored as [K,M]; likewise op(B) is B[K,N] or B stored as [N,K].
struct GemmShape {
  std::int64_t m = 1;
  std::int64_t n = 1;
  std::int64_t k = 1;
  bool trans_a = false;
  bool trans_b = false;
};

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* output);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* weight, const T* grad_out, T* grad_in);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* input, const T* grad_out, T* grad_weight);
template <typename T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate);

}  // namespace reference

// grad_* outputs are accumulated into (+=), matching gradient fan-in.
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* output);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* weight, const T* grad_out, T* grad_in);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* input, const T* grad_out, T* grad_weight);
template <typename T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate);

}  // namespace bgf::kernels
