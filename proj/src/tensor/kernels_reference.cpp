#include "bgf/kernels.hpp"
#include "bgf/tensor.hpp"

namespace bgf::kernels {

void ConvGeometry::validate() const {
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                     " not divisible by groups " + std::to_string(groups));
  }
  if (stride_h < 1 || stride_w < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad_h < 0 || pad_w < 0) throw ShapeError("conv2d: padding must be >= 0");
  if (in_h + 2 * pad_h - kernel_h < 0 || in_w + 2 * pad_w - kernel_w < 0 || out_h() <= 0 || out_w() <= 0) {
    throw ShapeError("conv2d: output extent <= 0");
  }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* output) {
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const auto cin_g = g.in_per_group(), cout_g = g.out_per_group();
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_channels; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oh = 0; oh < oh_n; ++oh)
        for (std::int64_t ow = 0; ow < ow_n; ++ow) {
          T acc = bias ? bias[co] : T(0);
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
                const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
                const std::int64_t iw = ow * g.stride_w - g.pad_w + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                const std::int64_t cin = grp * cin_g + ci;
                acc += weight[((co * cin_g + ci) * g.kernel_h + kh) * g.kernel_w + kw] *
                       input[((n * g.in_channels + cin) * g.in_h + ih) * g.in_w + iw];
              }
          output[((n * g.out_channels + co) * oh_n + oh) * ow_n + ow] = acc;
        }
    }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* weight, const T* grad_out, T* grad_in) {
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const auto cin_g = g.in_per_group(), cout_g = g.out_per_group();
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_channels; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oh = 0; oh < oh_n; ++oh)
        for (std::int64_t ow = 0; ow < ow_n; ++ow) {
          const T go = grad_out[((n * g.out_channels + co) * oh_n + oh) * ow_n + ow];
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
                const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
                const std::int64_t iw = ow * g.stride_w - g.pad_w + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                const std::int64_t cin = grp * cin_g + ci;
                grad_in[((n * g.in_channels + cin) * g.in_h + ih) * g.in_w + iw] +=
                    weight[((co * cin_g + ci) * g.kernel_h + kh) * g.kernel_w + kw] * go;
              }
        }
    }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* input, const T* grad_out, T* grad_weight) {
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const auto cin_g = g.in_per_group(), cout_g = g.out_per_group();
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_channels; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oh = 0; oh < oh_n; ++oh)
        for (std::int64_t ow = 0; ow < ow_n; ++ow) {
          const T go = grad_out[((n * g.out_channels + co) * oh_n + oh) * ow_n + ow];
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
                const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
                const std::int64_t iw = ow * g.stride_w - g.pad_w + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                const std::int64_t cin = grp * cin_g + ci;
                grad_weight[((co * cin_g + ci) * g.kernel_h + kh) * g.kernel_w + kw] +=
                    input[((n * g.in_channels + cin) * g.in_h + ih) * g.in_w + iw] * go;
              }
        }
    }
}

template <typename T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate) {
  for (std::int64_t i = 0; i < s.m; ++i)
    for (std::int64_t j = 0; j < s.n; ++j) {
      T acc = accumulate ? c[i * s.n + j] : T(0);
      for (std::int64_t p = 0; p < s.k; ++p) {
        const T av = s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
        const T bv = s.trans_b ? b[j * s.k + p] : b[p * s.n + j];
        acc += av * bv;
      }
      c[i * s.n + j] = acc;
    }
}

#define BGF_INSTANTIATE(T)                                                                          \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);          \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);             \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*);            \
  template void gemm<T>(const GemmShape&, const T*, const T*, T*, bool);
BGF_INSTANTIATE(float)
BGF_INSTANTIATE(double)
#undef BGF_INSTANTIATE

}  // namespace reference
}  // namespace bgf::kernels
