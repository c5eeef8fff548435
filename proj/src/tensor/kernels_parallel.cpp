#include <algorithm>
#include <vector>

#include "bgf/kernels.hpp"

namespace bgf::kernels {
namespace {

constexpr std::int64_t kParallelGrain = 1 << 15;
constexpr std::int64_t kMr = 4;
constexpr std::int64_t kNc = 256;

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride_h == 1 && g.stride_w == 1 && g.pad_h == 0 && g.pad_w == 0;
}

// Depthwise and very narrow convolutions stay on the direct loops.
bool use_direct(const ConvGeometry& g) {
  return g.out_per_group() < kMr || g.in_per_group() * g.kernel_h * g.kernel_w < kMr;
}

// 1x1/stride-1/unpadded convolutions are treated as one long row per plane.
ConvGeometry flatten_pointwise(ConvGeometry g) {
  if (is_pointwise(g)) {
    g.in_w *= g.in_h;
    g.in_h = 1;
  }
  return g;
}

// Output columns ow for which iw = ow*stride - pad + kw lies inside [0, in_w).
inline void valid_cols(std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t in_w, std::int64_t out_w,
                       std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t num = pad - kw;
  lo = num > 0 ? (num + stride - 1) / stride : 0;
  const std::int64_t top = in_w - 1 + pad - kw;
  hi = top < 0 ? -1 : std::min(out_w - 1, top / stride);
}

// col[(ci, kh, kw), (oh, ow)] for one group of one image; zeros where padded.
template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const std::int64_t plane = oh_n * ow_n;
  const std::int64_t cin_g = g.in_per_group();
  for (std::int64_t ci = 0; ci < cin_g; ++ci)
    for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
      for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
        T* dst = col + ((ci * g.kernel_h + kh) * g.kernel_w + kw) * plane;
        const T* src = in + ci * g.in_h * g.in_w;
        std::int64_t lo, hi;
        valid_cols(kw, g.stride_w, g.pad_w, g.in_w, ow_n, lo, hi);
        for (std::int64_t oh = 0; oh < oh_n; ++oh) {
          T* drow = dst + oh * ow_n;
          const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
          if (ih < 0 || ih >= g.in_h || lo > hi) {
            std::fill(drow, drow + ow_n, T(0));
            continue;
          }
          std::fill(drow, drow + lo, T(0));
          std::fill(drow + hi + 1, drow + ow_n, T(0));
          const T* srow = src + ih * g.in_w - g.pad_w + kw;
          if (g.stride_w == 1) {
            std::copy(srow + lo, srow + hi + 1, drow + lo);
          } else {
            for (std::int64_t ow = lo; ow <= hi; ++ow) drow[ow] = srow[ow * g.stride_w];
          }
        }
      }
}

// Scatter-add of a column buffer back onto one group of one image.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* in) {
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const std::int64_t plane = oh_n * ow_n;
  const std::int64_t cin_g = g.in_per_group();
  for (std::int64_t ci = 0; ci < cin_g; ++ci)
    for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
      for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
        const T* src = col + ((ci * g.kernel_h + kh) * g.kernel_w + kw) * plane;
        T* dst = in + ci * g.in_h * g.in_w;
        std::int64_t lo, hi;
        valid_cols(kw, g.stride_w, g.pad_w, g.in_w, ow_n, lo, hi);
        if (lo > hi) continue;
        for (std::int64_t oh = 0; oh < oh_n; ++oh) {
          const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          const T* srow = src + oh * ow_n;
          T* drow = dst + ih * g.in_w - g.pad_w + kw;
          if (g.stride_w == 1) {
            for (std::int64_t ow = lo; ow <= hi; ++ow) drow[ow] += srow[ow];
          } else {
            for (std::int64_t ow = lo; ow <= hi; ++ow) drow[ow * g.stride_w] += srow[ow];
          }
        }
      }
}

template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buf[2];
  return buf[slot];
}

template <typename T>
void direct_forward(const ConvGeometry& geom, const T* input, const T* weight, const T* bias, T* output) {
  const ConvGeometry g = flatten_pointwise(geom);
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const auto cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::int64_t plane = oh_n * ow_n;
  const std::int64_t work = g.batch * g.out_channels * plane * cin_g * g.kernel_h * g.kernel_w;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParallelGrain)
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_channels; ++co) {
      T* out = output + (n * g.out_channels + co) * plane;
      std::fill(out, out + plane, bias ? bias[co] : T(0));
      const std::int64_t grp = co / cout_g;
      for (std::int64_t ci = 0; ci < cin_g; ++ci) {
        const T* in = input + (n * g.in_channels + grp * cin_g + ci) * g.in_h * g.in_w;
        const T* wk = weight + (co * cin_g + ci) * g.kernel_h * g.kernel_w;
        for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
          for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
            const T w = wk[kh * g.kernel_w + kw];
            std::int64_t lo, hi;
            valid_cols(kw, g.stride_w, g.pad_w, g.in_w, ow_n, lo, hi);
            if (lo > hi) continue;
            for (std::int64_t oh = 0; oh < oh_n; ++oh) {
              const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              T* orow = out + oh * ow_n;
              const T* irow = in + ih * g.in_w - g.pad_w + kw;
              if (g.stride_w == 1) {
                for (std::int64_t ow = lo; ow <= hi; ++ow) orow[ow] += w * irow[ow];
              } else {
                for (std::int64_t ow = lo; ow <= hi; ++ow) orow[ow] += w * irow[ow * g.stride_w];
              }
            }
          }
      }
    }
}

template <typename T>
void direct_backward_input(const ConvGeometry& geom, const T* weight, const T* grad_out, T* grad_in) {
  const ConvGeometry g = flatten_pointwise(geom);
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const auto cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::int64_t plane = oh_n * ow_n;
  const std::int64_t work = g.batch * g.out_channels * plane * cin_g * g.kernel_h * g.kernel_w;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParallelGrain)
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t cin = 0; cin < g.in_channels; ++cin) {
      const std::int64_t grp = cin / cin_g;
      const std::int64_t ci = cin - grp * cin_g;
      T* gin = grad_in + (n * g.in_channels + cin) * g.in_h * g.in_w;
      for (std::int64_t co = grp * cout_g; co < (grp + 1) * cout_g; ++co) {
        const T* go = grad_out + (n * g.out_channels + co) * plane;
        const T* wk = weight + (co * cin_g + ci) * g.kernel_h * g.kernel_w;
        for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
          for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
            const T w = wk[kh * g.kernel_w + kw];
            std::int64_t lo, hi;
            valid_cols(kw, g.stride_w, g.pad_w, g.in_w, ow_n, lo, hi);
            if (lo > hi) continue;
            for (std::int64_t oh = 0; oh < oh_n; ++oh) {
              const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              const T* grow = go + oh * ow_n;
              T* irow = gin + ih * g.in_w - g.pad_w + kw;
              if (g.stride_w == 1) {
                for (std::int64_t ow = lo; ow <= hi; ++ow) irow[ow] += w * grow[ow];
              } else {
                for (std::int64_t ow = lo; ow <= hi; ++ow) irow[ow * g.stride_w] += w * grow[ow];
              }
            }
          }
      }
    }
}

template <typename T>
void direct_backward_weight(const ConvGeometry& geom, const T* input, const T* grad_out, T* grad_weight) {
  const ConvGeometry g = flatten_pointwise(geom);
  const auto oh_n = g.out_h(), ow_n = g.out_w();
  const auto cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::int64_t plane = oh_n * ow_n;
  const std::int64_t work = g.batch * g.out_channels * plane * cin_g * g.kernel_h * g.kernel_w;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::int64_t co = 0; co < g.out_channels; ++co) {
    const std::int64_t grp = co / cout_g;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const T* go = grad_out + (n * g.out_channels + co) * plane;
      for (std::int64_t ci = 0; ci < cin_g; ++ci) {
        const T* in = input + (n * g.in_channels + grp * cin_g + ci) * g.in_h * g.in_w;
        T* gw = grad_weight + (co * cin_g + ci) * g.kernel_h * g.kernel_w;
        for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
          for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
            std::int64_t lo, hi;
            valid_cols(kw, g.stride_w, g.pad_w, g.in_w, ow_n, lo, hi);
            if (lo > hi) continue;
            T acc = T(0);
            for (std::int64_t oh = 0; oh < oh_n; ++oh) {
              const std::int64_t ih = oh * g.stride_h - g.pad_h + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              const T* grow = go + oh * ow_n;
              const T* irow = in + ih * g.in_w - g.pad_w + kw;
              if (g.stride_w == 1) {
                for (std::int64_t ow = lo; ow <= hi; ++ow) acc += irow[ow] * grow[ow];
              } else {
                for (std::int64_t ow = lo; ow <= hi; ++ow) acc += irow[ow * g.stride_w] * grow[ow];
              }
            }
            gw[kh * g.kernel_w + kw] += acc;
          }
      }
    }
  }
}

// Up to kMr rows of C over columns [0, cols); B is row-major [K, N] by now.
template <typename T>
inline void gemm_rows(std::int64_t rows, std::int64_t cols, std::int64_t k, const T* a, std::int64_t a_row,
                      std::int64_t a_col, const T* b, std::int64_t n, T* c, bool accumulate) {
  T* __restrict c0 = c;
  T* __restrict c1 = c + n;
  T* __restrict c2 = c + 2 * n;
  T* __restrict c3 = c + 3 * n;
  if (!accumulate) {
    for (std::int64_t r = 0; r < rows; ++r) std::fill(c + r * n, c + r * n + cols, T(0));
  }
  if (rows == kMr) {
    for (std::int64_t p = 0; p < k; ++p) {
      const T* __restrict br = b + p * n;
      const T* ap = a + p * a_col;
      const T a0 = ap[0], a1 = ap[a_row], a2 = ap[2 * a_row], a3 = ap[3 * a_row];
      for (std::int64_t j = 0; j < cols; ++j) {
        const T bv = br[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
    return;
  }
  for (std::int64_t r = 0; r < rows; ++r) {
    T* __restrict cr = c + r * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T* __restrict br = b + p * n;
      const T av = a[r * a_row + p * a_col];
      for (std::int64_t j = 0; j < cols; ++j) cr[j] += av * br[j];
    }
  }
}

// Rows [r0, r1) of C. B must already be row-major [K, N].
template <typename T>
void gemm_rows_range(const GemmShape& s, const T* a, const T* bp, T* c, bool accumulate, std::int64_t rb0,
                     std::int64_t rb1) {
  // Element (i, p) of op(A) sits at a[i * a_row + p * a_col].
  const std::int64_t a_row = s.trans_a ? 1 : s.k;
  const std::int64_t a_col = s.trans_a ? s.m : 1;
  for (std::int64_t rb = rb0; rb < rb1; ++rb) {
    const std::int64_t i0 = rb * kMr;
    const std::int64_t rows = std::min(kMr, s.m - i0);
    for (std::int64_t j0 = 0; j0 < s.n; j0 += kNc) {
      gemm_rows(rows, std::min(kNc, s.n - j0), s.k, a + i0 * a_row, a_row, a_col, bp + j0, s.n, c + i0 * s.n + j0,
                accumulate);
    }
  }
}

template <typename T>
const T* pack_b(const GemmShape& s, const T* b, std::vector<T>& packed) {
  if (!s.trans_b) return b;
  packed.resize(static_cast<std::size_t>(s.k * s.n));
  for (std::int64_t j = 0; j < s.n; ++j)
    for (std::int64_t p = 0; p < s.k; ++p) packed[static_cast<std::size_t>(p * s.n + j)] = b[j * s.k + p];
  return packed.data();
}

// Single-threaded gemm used inside per-sample parallel loops.
template <typename T>
void gemm_serial(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate, std::vector<T>& packed) {
  if (s.m <= 0 || s.n <= 0) return;
  if (s.k <= 0) {
    if (!accumulate) std::fill(c, c + s.m * s.n, T(0));
    return;
  }
  gemm_rows_range(s, a, pack_b(s, b, packed), c, accumulate, 0, (s.m + kMr - 1) / kMr);
}

}  // namespace

template <typename T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate) {
  if (s.m <= 0 || s.n <= 0) return;
  if (s.k <= 0) {
    if (!accumulate) std::fill(c, c + s.m * s.n, T(0));
    return;
  }
  std::vector<T> packed;
  const T* bp = pack_b(s, b, packed);
  const std::int64_t row_blocks = (s.m + kMr - 1) / kMr;
  const std::int64_t work = s.m * s.n * s.k;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::int64_t rb = 0; rb < row_blocks; ++rb) gemm_rows_range(s, a, bp, c, accumulate, rb, rb + 1);
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* output) {
  if (use_direct(g)) return direct_forward(g, input, weight, bias, output);
  const std::int64_t plane = g.out_h() * g.out_w();
  const std::int64_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::int64_t kdim = cin_g * g.kernel_h * g.kernel_w;
  const bool pointwise = is_pointwise(g);
  const std::int64_t work = g.batch * g.out_channels * plane * kdim;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::int64_t n = 0; n < g.batch; ++n) {
    std::vector<T>& col = scratch<T>(0);
    std::vector<T>& packed = scratch<T>(1);
    if (!pointwise) col.resize(static_cast<std::size_t>(kdim * plane));
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      const T* in = input + (n * g.in_channels + grp * cin_g) * g.in_h * g.in_w;
      T* out = output + (n * g.out_channels + grp * cout_g) * plane;
      const T* src = in;
      if (!pointwise) {
        im2col(g, in, col.data());
        src = col.data();
      }
      gemm_serial<T>({cout_g, plane, kdim, false, false}, weight + grp * cout_g * kdim, src, out, false, packed);
      if (bias) {
        for (std::int64_t co = 0; co < cout_g; ++co) {
          T* orow = out + co * plane;
          const T bv = bias[grp * cout_g + co];
          for (std::int64_t q = 0; q < plane; ++q) orow[q] += bv;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* weight, const T* grad_out, T* grad_in) {
  if (use_direct(g)) return direct_backward_input(g, weight, grad_out, grad_in);
  const std::int64_t plane = g.out_h() * g.out_w();
  const std::int64_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::int64_t kdim = cin_g * g.kernel_h * g.kernel_w;
  const bool pointwise = is_pointwise(g);
  const std::int64_t work = g.batch * g.out_channels * plane * kdim;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::int64_t n = 0; n < g.batch; ++n) {
    std::vector<T>& col = scratch<T>(0);
    std::vector<T>& packed = scratch<T>(1);
    if (!pointwise) col.resize(static_cast<std::size_t>(kdim * plane));
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      T* gin = grad_in + (n * g.in_channels + grp * cin_g) * g.in_h * g.in_w;
      const T* go = grad_out + (n * g.out_channels + grp * cout_g) * plane;
      const T* w = weight + grp * cout_g * kdim;
      if (pointwise) {
        gemm_serial<T>({kdim, plane, cout_g, true, false}, w, go, gin, true, packed);
      } else {
        gemm_serial<T>({kdim, plane, cout_g, true, false}, w, go, col.data(), false, packed);
        col2im_add(g, col.data(), gin);
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* input, const T* grad_out, T* grad_weight) {
  if (use_direct(g)) return direct_backward_weight(g, input, grad_out, grad_weight);
  const std::int64_t plane = g.out_h() * g.out_w();
  const std::int64_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::int64_t kdim = cin_g * g.kernel_h * g.kernel_w;
  const bool pointwise = is_pointwise(g);
  const std::int64_t wsize = g.out_channels * kdim;
  // Per-sample partial gradients, summed in sample order so the result does not
  // depend on the thread count.
  std::vector<T> partial(static_cast<std::size_t>(g.batch * wsize));
  const std::int64_t work = g.batch * g.out_channels * plane * kdim;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::int64_t n = 0; n < g.batch; ++n) {
    std::vector<T>& col = scratch<T>(0);
    std::vector<T>& packed = scratch<T>(1);
    if (!pointwise) col.resize(static_cast<std::size_t>(kdim * plane));
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      const T* in = input + (n * g.in_channels + grp * cin_g) * g.in_h * g.in_w;
      const T* go = grad_out + (n * g.out_channels + grp * cout_g) * plane;
      const T* src = in;
      if (!pointwise) {
        im2col(g, in, col.data());
        src = col.data();
      }
      gemm_serial<T>({cout_g, kdim, plane, false, true}, go, src, partial.data() + n * wsize + grp * cout_g * kdim,
                     false, packed);
    }
  }
  for (std::int64_t n = 0; n < g.batch; ++n) {
    const T* src = partial.data() + n * wsize;
    for (std::int64_t i = 0; i < wsize; ++i) grad_weight[i] += src[i];
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

}  // namespace bgf::kernels
