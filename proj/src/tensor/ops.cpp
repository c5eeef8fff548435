#include "bgf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "bgf/kernels.hpp"

namespace bgf::ops {
namespace {

std::int64_t norm_axis(std::int64_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

// outer * axis_len * inner decomposition around one axis.
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::int64_t axis) {
  AxisSplit a;
  for (std::int64_t i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
  a.len = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

template <typename T>
void accumulate(NdTensor<T>& dst, const NdTensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  const std::int64_t n = dst.numel();
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  return out;
}

// For each flat index of `out`, the flat index into a tensor of shape `in`
// broadcast to `out`.
std::vector<std::int64_t> broadcast_map(const Shape& in, const Shape& out) {
  const std::int64_t n = shape_numel(out);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  const std::size_t r = out.size();
  std::vector<std::int64_t> in_stride(r, 0);
  std::int64_t st = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = in[i] == 1 ? 0 : st;
    st *= in[i];
  }
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t f = 0; f < n; ++f) {
    map[static_cast<std::size_t>(f)] = off;
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      off += in_stride[i];
      if (idx[i] < out[i]) break;
      off -= in_stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return map;
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary(const char* name, Var<T> x, Fwd fwd, Bwd dfdx) {
  Graph<T>& g = x.graph();
  const NdTensor<T>& xv = x.value();
  NdTensor<T> out(xv.shape());
  for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id();
  return g.record(name, std::move(out), {xid}, [xid, dfdx](Graph<T>& gr, std::size_t self) {
    const NdTensor<T>& gy = gr.grad(self);
    const NdTensor<T>& xv2 = gr.value(xid);
    const NdTensor<T>& yv = gr.value(self);
    NdTensor<T>& gx = gr.grad(xid);
    for (std::int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * dfdx(xv2[i], yv[i]);
  });
}

enum class BinOp { Add, Sub, Mul };

template <typename T>
Var<T> binary(const char* name, BinOp op, Var<T> a, Var<T> b) {
  Graph<T>& g = a.graph();
  const NdTensor<T>& av = a.value();
  const NdTensor<T>& bv = b.value();
  const std::size_t aid = a.id(), bid = b.id();
  if (av.shape() == bv.shape()) {
    NdTensor<T> out(av.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) {
      out[i] = op == BinOp::Add ? av[i] + bv[i] : op == BinOp::Sub ? av[i] - bv[i] : av[i] * bv[i];
    }
    return g.record(name, std::move(out), {aid, bid}, [aid, bid, op](Graph<T>& gr, std::size_t self) {
      const NdTensor<T>& gy = gr.grad(self);
      const std::int64_t n = gy.numel();
      if (gr.requires_grad(aid)) {
        NdTensor<T>& ga = gr.grad(aid);
        const NdTensor<T>& bv2 = gr.value(bid);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += op == BinOp::Mul ? gy[i] * bv2[i] : gy[i];
      }
      if (gr.requires_grad(bid)) {
        NdTensor<T>& gb = gr.grad(bid);
        const NdTensor<T>& av2 = gr.value(aid);
        for (std::int64_t i = 0; i < n; ++i) {
          gb[i] += op == BinOp::Mul ? gy[i] * av2[i] : op == BinOp::Sub ? -gy[i] : gy[i];
        }
      }
    });
  }
  const Shape out_shape = broadcast_shape(av.shape(), bv.shape(), name);
  auto amap = std::make_shared<std::vector<std::int64_t>>(broadcast_map(av.shape(), out_shape));
  auto bmap = std::make_shared<std::vector<std::int64_t>>(broadcast_map(bv.shape(), out_shape));
  NdTensor<T> out(out_shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const T x = av[(*amap)[static_cast<std::size_t>(i)]];
    const T y = bv[(*bmap)[static_cast<std::size_t>(i)]];
    out[i] = op == BinOp::Add ? x + y : op == BinOp::Sub ? x - y : x * y;
  }
  return g.record(name, std::move(out), {aid, bid}, [aid, bid, op, amap, bmap](Graph<T>& gr, std::size_t self) {
    const NdTensor<T>& gy = gr.grad(self);
    const NdTensor<T>& av2 = gr.value(aid);
    const NdTensor<T>& bv2 = gr.value(bid);
    const bool need_a = gr.requires_grad(aid), need_b = gr.requires_grad(bid);
    NdTensor<T>* ga = need_a ? &gr.grad(aid) : nullptr;
    NdTensor<T>* gb = need_b ? &gr.grad(bid) : nullptr;
    for (std::int64_t i = 0; i < gy.numel(); ++i) {
      const auto ia = (*amap)[static_cast<std::size_t>(i)];
      const auto ib = (*bmap)[static_cast<std::size_t>(i)];
      if (ga) (*ga)[ia] += op == BinOp::Mul ? gy[i] * bv2[ib] : gy[i];
      if (gb) (*gb)[ib] += op == BinOp::Mul ? gy[i] * av2[ia] : op == BinOp::Sub ? -gy[i] : gy[i];
    }
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::optional<Var<T>> bias, const Conv2dOptions& opt) {
  const NdTensor<T>& xv = input.value();
  const NdTensor<T>& wv = weight.value();
  require_rank(xv.shape(), 4, "conv2d input");
  require_rank(wv.shape(), 4, "conv2d weight");
  kernels::ConvGeometry geom;
  geom.batch = xv.dim(0);
  geom.in_channels = xv.dim(1);
  geom.in_h = xv.dim(2);
  geom.in_w = xv.dim(3);
  geom.out_channels = wv.dim(0);
  geom.kernel_h = wv.dim(2);
  geom.kernel_w = wv.dim(3);
  geom.stride_h = opt.stride_h;
  geom.stride_w = opt.stride_w;
  geom.pad_h = opt.pad_h;
  geom.pad_w = opt.pad_w;
  geom.groups = opt.groups;
  geom.validate();
  if (wv.dim(1) * opt.groups != xv.dim(1)) {
    throw ShapeError("conv2d: weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != wv.dim(0))) {
    throw ShapeError("conv2d: bias must have shape [C_out]");
  }
  NdTensor<T> out({geom.batch, geom.out_channels, geom.out_h(), geom.out_w()});
  kernels::conv2d_forward(geom, xv.ptr(), wv.ptr(), bias ? bias->value().ptr() : nullptr, out.ptr());
  std::vector<std::size_t> parents{input.id(), weight.id()};
  if (bias) parents.push_back(bias->id());
  const std::size_t xid = input.id(), wid = weight.id();
  const std::size_t bid = bias ? bias->id() : 0;
  const bool has_bias = bias.has_value();
  return input.graph().record("conv2d", std::move(out), std::move(parents),
                              [geom, xid, wid, bid, has_bias](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    if (g.requires_grad(xid)) kernels::conv2d_backward_input(geom, g.value(wid).ptr(), gy.ptr(), g.grad(xid).ptr());
    if (g.requires_grad(wid)) kernels::conv2d_backward_weight(geom, g.value(xid).ptr(), gy.ptr(), g.grad(wid).ptr());
    if (has_bias && g.requires_grad(bid)) {
      NdTensor<T>& gb = g.grad(bid);
      const std::int64_t plane = gy.dim(2) * gy.dim(3);
      for (std::int64_t n = 0; n < gy.dim(0); ++n)
        for (std::int64_t c = 0; c < gy.dim(1); ++c) {
          const T* p = gy.ptr() + (n * gy.dim(1) + c) * plane;
          T acc = 0;
          for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
          gb[c] += acc;
        }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  const NdTensor<T>& xv = x.value();
  require_rank(xv.shape(), 4, "upsample_nearest2x");
  const std::int64_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  NdTensor<T> out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t i = 0; i < 2 * h; ++i)
      for (std::int64_t j = 0; j < 2 * w; ++j) out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
  const std::size_t xid = x.id();
  return x.graph().record("upsample_nearest2x", std::move(out), {xid}, [xid, nc, h, w](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    NdTensor<T>& gx = g.grad(xid);
    for (std::int64_t p = 0; p < nc; ++p)
      for (std::int64_t i = 0; i < 2 * h; ++i)
        for (std::int64_t j = 0; j < 2 * w; ++j) gx[(p * h + i / 2) * w + j / 2] += gy[(p * 2 * h + i) * 2 * w + j];
  });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, std::int64_t kernel, std::int64_t stride, std::int64_t padding) {
  const NdTensor<T>& xv = x.value();
  require_rank(xv.shape(), 4, "max_pool2d");
  if (kernel < 1 || stride < 1 || padding < 0) throw ShapeError("max_pool2d: invalid kernel/stride/padding");
  const std::int64_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::int64_t oh = (h + 2 * padding - kernel) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - kernel) / stride + 1;
  if (h + 2 * padding - kernel < 0 || oh <= 0 || ow <= 0) throw ShapeError("max_pool2d: output extent <= 0");
  NdTensor<T> out({xv.dim(0), xv.dim(1), oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_idx = -1;
        for (std::int64_t ki = 0; ki < kernel; ++ki) {
          const std::int64_t ii = i * stride - padding + ki;
          if (ii < 0 || ii >= h) continue;
          for (std::int64_t kj = 0; kj < kernel; ++kj) {
            const std::int64_t jj = j * stride - padding + kj;
            if (jj < 0 || jj >= w) continue;
            const std::int64_t idx = (p * h + ii) * w + jj;
            if (best_idx < 0 || xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        if (best_idx < 0) throw ShapeError("max_pool2d: window entirely in padding");
        const std::int64_t o = (p * oh + i) * ow + j;
        out[o] = best;
        (*argmax)[static_cast<std::size_t>(o)] = best_idx;
      }
  const std::size_t xid = x.id();
  return x.graph().record("max_pool2d", std::move(out), {xid}, [xid, argmax](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    NdTensor<T>& gx = g.grad(xid);
    for (std::int64_t o = 0; o < gy.numel(); ++o) gx[(*argmax)[static_cast<std::size_t>(o)]] += gy[o];
  });
}

template <typename T>
Var<T> softmax(Var<T> x, std::int64_t axis) {
  const NdTensor<T>& xv = x.value();
  axis = norm_axis(axis, xv.rank(), "softmax");
  const AxisSplit s = split_at(xv.shape(), axis);
  NdTensor<T> out(xv.shape());
  if (s.inner == 1) {
    const T* src = xv.ptr();
    T* dst = out.ptr();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      const T* xr = src + o * s.len;
      T* yr = dst + o * s.len;
      T m = xr[0];
      for (std::int64_t l = 1; l < s.len; ++l) m = std::max(m, xr[l]);
      T z = 0;
      for (std::int64_t l = 0; l < s.len; ++l) {
        yr[l] = std::exp(xr[l] - m);
        z += yr[l];
      }
      const T inv = T(1) / z;
      for (std::int64_t l = 0; l < s.len; ++l) yr[l] *= inv;
    }
  } else {
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.len * s.inner + in;
      T m = xv[base];
      for (std::int64_t l = 1; l < s.len; ++l) m = std::max(m, xv[base + l * s.inner]);
      T z = 0;
      for (std::int64_t l = 0; l < s.len; ++l) {
        const T e = std::exp(xv[base + l * s.inner] - m);
        out[base + l * s.inner] = e;
        z += e;
      }
      for (std::int64_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
    }
  }
  const std::size_t xid = x.id();
  return x.graph().record("softmax", std::move(out), {xid}, [xid, s](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    const NdTensor<T>& y = g.value(self);
    NdTensor<T>& gx = g.grad(xid);
    if (s.inner == 1) {
      for (std::int64_t o = 0; o < s.outer; ++o) {
        const T* gr = gy.ptr() + o * s.len;
        const T* yr = y.ptr() + o * s.len;
        T* xr = gx.ptr() + o * s.len;
        T dot = 0;
        for (std::int64_t l = 0; l < s.len; ++l) dot += gr[l] * yr[l];
        for (std::int64_t l = 0; l < s.len; ++l) xr[l] += yr[l] * (gr[l] - dot);
      }
      return;
    }
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.len * s.inner + in;
        T dot = 0;
        for (std::int64_t l = 0; l < s.len; ++l) dot += gy[base + l * s.inner] * y[base + l * s.inner];
        for (std::int64_t l = 0; l < s.len; ++l) {
          const std::int64_t i = base + l * s.inner;
          gx[i] += y[i] * (gy[i] - dot);
        }
      }
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const NdTensor<T>& av = a.value();
  const NdTensor<T>& bv = b.value();
  std::int64_t batch = 1, m, k, n;
  Shape out_shape;
  if (av.rank() == 2 && bv.rank() == 2) {
    m = av.dim(0);
    k = av.dim(1);
    n = bv.dim(1);
    if (bv.dim(0) != k) throw ShapeError("matmul: inner dims differ " + shape_str(av.shape()) + shape_str(bv.shape()));
    out_shape = {m, n};
  } else if (av.rank() == 3 && bv.rank() == 3) {
    batch = av.dim(0);
    m = av.dim(1);
    k = av.dim(2);
    n = bv.dim(2);
    if (bv.dim(0) != batch || bv.dim(1) != k) {
      throw ShapeError("matmul: incompatible " + shape_str(av.shape()) + shape_str(bv.shape()));
    }
    out_shape = {batch, m, n};
  } else {
    throw ShapeError("matmul: expected two rank-2 or two rank-3 operands");
  }
  NdTensor<T> out(out_shape);
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    kernels::gemm<T>({m, n, k, false, false}, av.ptr() + bi * m * k, bv.ptr() + bi * k * n, out.ptr() + bi * m * n,
                     false);
  }
  const std::size_t aid = a.id(), bid = b.id();
  return a.graph().record("matmul", std::move(out), {aid, bid}, [=](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    const NdTensor<T>& av2 = g.value(aid);
    const NdTensor<T>& bv2 = g.value(bid);
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      if (g.requires_grad(aid)) {
        kernels::gemm<T>({m, k, n, false, true}, gy.ptr() + bi * m * n, bv2.ptr() + bi * k * n,
                         g.grad(aid).ptr() + bi * m * k, true);
      }
      if (g.requires_grad(bid)) {
        kernels::gemm<T>({k, n, m, true, false}, av2.ptr() + bi * m * k, gy.ptr() + bi * m * n,
                         g.grad(bid).ptr() + bi * k * n, true);
      }
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b) {
  const Shape xs = x.shape();
  require_rank(w.shape(), 2, "linear weight");
  const std::int64_t k = w.dim(0), n = w.dim(1);
  if (xs.empty() || xs.back() != k) throw ShapeError("linear: input " + shape_str(xs) + " vs weight " + shape_str(w.shape()));
  const std::int64_t rows = x.value().numel() / k;
  Var<T> y = matmul(reshape(x, {rows, k}), w);
  if (b) {
    if (b->value().rank() != 1 || b->dim(0) != n) throw ShapeError("linear: bias must be [N]");
    y = add(y, reshape(*b, {1, n}));
  }
  Shape out = xs;
  out.back() = n;
  return reshape(y, out);
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary<T>("sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(Var<T> x) {
  return unary<T>(
      "silu", x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary<T>("relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> hardswish(Var<T> x) {
  return unary<T>(
      "hardswish", x, [](T v) { return v * std::clamp(v + T(3), T(0), T(6)) / T(6); },
      [](T v, T) {
        if (v <= T(-3)) return T(0);
        if (v >= T(3)) return T(1);
        return (T(2) * v + T(3)) / T(6);
      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary<T>("add", BinOp::Add, a, b);
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary<T>("sub", BinOp::Sub, a, b);
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary<T>("mul", BinOp::Mul, a, b);
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return unary<T>("scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  axis = norm_axis(axis, s0.size(), "concat");
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<std::int64_t> lens;
  std::vector<std::size_t> ids;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<std::int64_t>(i) != axis && s[i] != s0[i]) {
        throw ShapeError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) + " differ off-axis");
      }
    }
    lens.push_back(s[static_cast<std::size_t>(axis)]);
    out_shape[static_cast<std::size_t>(axis)] += lens.back();
    ids.push_back(v.id());
  }
  const AxisSplit so = split_at(out_shape, axis);
  NdTensor<T> out(out_shape);
  std::int64_t pos = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const NdTensor<T>& v = xs[t].value();
    const std::int64_t chunk = lens[t] * so.inner;
    for (std::int64_t o = 0; o < so.outer; ++o) {
      std::copy_n(v.ptr() + o * chunk, chunk, out.ptr() + o * so.len * so.inner + pos * so.inner);
    }
    pos += lens[t];
  }
  return xs[0].graph().record("concat", std::move(out), ids, [ids, lens, so](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    std::int64_t p = 0;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const std::int64_t chunk = lens[t] * so.inner;
      if (g.requires_grad(ids[t])) {
        NdTensor<T>& gx = g.grad(ids[t]);
        for (std::int64_t o = 0; o < so.outer; ++o) {
          const T* src = gy.ptr() + o * so.len * so.inner + p * so.inner;
          T* dst = gx.ptr() + o * chunk;
          for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      p += lens[t];
    }
  });
}

template <typename T>
std::vector<Var<T>> split(Var<T> x, std::int64_t axis, const std::vector<std::int64_t>& sizes) {
  const Shape xs = x.shape();
  axis = norm_axis(axis, xs.size(), "split");
  const std::int64_t total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
  if (total != xs[static_cast<std::size_t>(axis)]) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis extent is " +
                     std::to_string(xs[static_cast<std::size_t>(axis)]));
  }
  const AxisSplit s = split_at(xs, axis);
  std::vector<Var<T>> outs;
  std::int64_t pos = 0;
  const std::size_t xid = x.id();
  for (auto len : sizes) {
    if (len <= 0) throw ShapeError("split: non-positive piece");
    Shape os = xs;
    os[static_cast<std::size_t>(axis)] = len;
    NdTensor<T> out(os);
    const std::int64_t chunk = len * s.inner;
    const NdTensor<T>& xv = x.value();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(xv.ptr() + o * s.len * s.inner + pos * s.inner, chunk, out.ptr() + o * chunk);
    }
    const std::int64_t start = pos;
    outs.push_back(x.graph().record("split", std::move(out), {xid}, [xid, s, start, chunk](Graph<T>& g, std::size_t self) {
      const NdTensor<T>& gy = g.grad(self);
      NdTensor<T>& gx = g.grad(xid);
      for (std::int64_t o = 0; o < s.outer; ++o) {
        T* dst = gx.ptr() + o * s.len * s.inner + start * s.inner;
        const T* src = gy.ptr() + o * chunk;
        for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }));
    pos += len;
  }
  return outs;
}

template <typename T>
Var<T> mean(Var<T> x, std::int64_t axis, bool keepdim) {
  const Shape& xs = x.shape();
  axis = norm_axis(axis, xs.size(), "mean");
  const AxisSplit s = split_at(xs, axis);
  Shape os = xs;
  if (keepdim) {
    os[static_cast<std::size_t>(axis)] = 1;
  } else {
    os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
  }
  NdTensor<T> out(os);
  const NdTensor<T>& xv = x.value();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      T acc = 0;
      for (std::int64_t l = 0; l < s.len; ++l) acc += xv[(o * s.len + l) * s.inner + in];
      out[o * s.inner + in] = acc / static_cast<T>(s.len);
    }
  const std::size_t xid = x.id();
  return x.graph().record("mean", std::move(out), {xid}, [xid, s](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    NdTensor<T>& gx = g.grad(xid);
    const T inv = T(1) / static_cast<T>(s.len);
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t l = 0; l < s.len; ++l)
        for (std::int64_t in = 0; in < s.inner; ++in) gx[(o * s.len + l) * s.inner + in] += gy[o * s.inner + in] * inv;
  });
}

template <typename T>
Var<T> max_reduce(Var<T> x, std::int64_t axis, bool keepdim) {
  const Shape& xs = x.shape();
  axis = norm_axis(axis, xs.size(), "max_reduce");
  const AxisSplit s = split_at(xs, axis);
  Shape os = xs;
  if (keepdim) {
    os[static_cast<std::size_t>(axis)] = 1;
  } else {
    os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
  }
  NdTensor<T> out(os);
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  const NdTensor<T>& xv = x.value();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      std::int64_t best = o * s.len * s.inner + in;
      for (std::int64_t l = 1; l < s.len; ++l) {
        const std::int64_t i = (o * s.len + l) * s.inner + in;
        if (xv[i] > xv[best]) best = i;
      }
      out[o * s.inner + in] = xv[best];
      (*arg)[static_cast<std::size_t>(o * s.inner + in)] = best;
    }
  const std::size_t xid = x.id();
  return x.graph().record("max_reduce", std::move(out), {xid}, [xid, arg](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    NdTensor<T>& gx = g.grad(xid);
    for (std::int64_t i = 0; i < gy.numel(); ++i) gx[(*arg)[static_cast<std::size_t>(i)]] += gy[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const NdTensor<T>& xv = x.value();
  T acc = 0;
  for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  const std::size_t xid = x.id();
  return x.graph().record("sum", NdTensor<T>({1}, acc), {xid}, [xid](Graph<T>& g, std::size_t self) {
    const T gy = g.grad(self)[0];
    NdTensor<T>& gx = g.grad(xid);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gy;
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  NdTensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id();
  return x.graph().record("reshape", std::move(out), {xid}, [xid](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    NdTensor<T>& gx = g.grad(xid);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gy[i];
  });
}

template <typename T>
Var<T> permute(Var<T> x, const std::vector<std::int64_t>& perm) {
  const Shape& xs = x.shape();
  const std::size_t r = xs.size();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= r || seen[static_cast<std::size_t>(p)]) {
      throw ShapeError("permute: invalid permutation");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = xs[static_cast<std::size_t>(perm[i])];
  std::vector<std::int64_t> in_stride(r);
  std::int64_t st = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = st;
    st *= xs[i];
  }
  // map[out flat] = in flat
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(shape_numel(os)));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::size_t f = 0; f < map->size(); ++f) {
    (*map)[f] = off;
    for (std::size_t i = r; i-- > 0;) {
      const std::int64_t step = in_stride[static_cast<std::size_t>(perm[i])];
      ++idx[i];
      off += step;
      if (idx[i] < os[i]) break;
      off -= step * idx[i];
      idx[i] = 0;
    }
  }
  NdTensor<T> out(os);
  const NdTensor<T>& xv = x.value();
  for (std::size_t f = 0; f < map->size(); ++f) out[static_cast<std::int64_t>(f)] = xv[(*map)[f]];
  const std::size_t xid = x.id();
  return x.graph().record("permute", std::move(out), {xid}, [xid, map](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    NdTensor<T>& gx = g.grad(xid);
    for (std::size_t f = 0; f < map->size(); ++f) gx[(*map)[f]] += gy[static_cast<std::int64_t>(f)];
  });
}

template <typename T>
Var<T> transpose(Var<T> x, std::int64_t a, std::int64_t b) {
  const std::size_t r = x.shape().size();
  a = norm_axis(a, r, "transpose");
  b = norm_axis(b, r, "transpose");
  std::vector<std::int64_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)]);
  return permute(x, perm);
}

template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormBuffers<T>& buffers, const BatchNormOptions& opt) {
  const NdTensor<T>& xv = x.value();
  require_rank(xv.shape(), 4, "batchnorm2d");
  const std::int64_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (gamma.value().numel() != c || beta.value().numel() != c || buffers.running_mean.numel() != c ||
      buffers.running_var.numel() != c) {
    throw ShapeError("batchnorm2d: parameter length does not match channels " + std::to_string(c));
  }
  Graph<T>& g = x.graph();
  const bool training = g.training();
  const std::int64_t count = n * plane;
  auto mean_v = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      double acc = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = xv.ptr() + (b * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      mu = static_cast<T>(acc / static_cast<double>(count));
      double sq = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = xv.ptr() + (b * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) sq += static_cast<double>((p[i] - mu) * (p[i] - mu));
      }
      var = static_cast<T>(sq / static_cast<double>(count));
      const T m = static_cast<T>(opt.momentum);
      const T unbiased = count > 1 ? static_cast<T>(sq / static_cast<double>(count - 1)) : var;
      buffers.running_mean[ch] = (T(1) - m) * buffers.running_mean[ch] + m * mu;
      buffers.running_var[ch] = (T(1) - m) * buffers.running_var[ch] + m * unbiased;
    } else {
      mu = buffers.running_mean[ch];
      var = buffers.running_var[ch];
    }
    (*mean_v)[static_cast<std::size_t>(ch)] = mu;
    (*invstd)[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(var + static_cast<T>(opt.eps));
  }
  NdTensor<T> out(xv.shape());
  const NdTensor<T>& gv = gamma.value();
  const NdTensor<T>& bv = beta.value();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T mu = (*mean_v)[static_cast<std::size_t>(ch)];
      const T is = (*invstd)[static_cast<std::size_t>(ch)];
      const T* p = xv.ptr() + (b * c + ch) * plane;
      T* q = out.ptr() + (b * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) q[i] = gv[ch] * (p[i] - mu) * is + bv[ch];
    }
  const std::size_t xid = x.id(), gid = gamma.id(), bid = beta.id();
  return g.record("batchnorm2d", std::move(out), {xid, gid, bid},
                  [=](Graph<T>& gr, std::size_t self) {
    const NdTensor<T>& gy = gr.grad(self);
    const NdTensor<T>& xv2 = gr.value(xid);
    const NdTensor<T>& gv2 = gr.value(gid);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T mu = (*mean_v)[static_cast<std::size_t>(ch)];
      const T is = (*invstd)[static_cast<std::size_t>(ch)];
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = xv2.ptr() + (b * c + ch) * plane;
        const T* d = gy.ptr() + (b * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          sum_dy += d[i];
          sum_dy_xhat += d[i] * (p[i] - mu) * is;
        }
      }
      if (gr.requires_grad(gid)) gr.grad(gid)[ch] += sum_dy_xhat;
      if (gr.requires_grad(bid)) gr.grad(bid)[ch] += sum_dy;
      if (gr.requires_grad(xid)) {
        NdTensor<T>& gx = gr.grad(xid);
        const T gam = gv2[ch];
        const T inv_count = T(1) / static_cast<T>(count);
        for (std::int64_t b = 0; b < n; ++b) {
          const T* p = xv2.ptr() + (b * c + ch) * plane;
          const T* d = gy.ptr() + (b * c + ch) * plane;
          T* q = gx.ptr() + (b * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            if (training) {
              const T xhat = (p[i] - mu) * is;
              q[i] += gam * is * (d[i] - inv_count * sum_dy - xhat * inv_count * sum_dy_xhat);
            } else {
              q[i] += gam * is * d[i];
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> gather_blocks(Var<T> x, std::span<const std::int32_t> index, std::int64_t k) {
  const NdTensor<T>& xv = x.value();
  require_rank(xv.shape(), 4, "gather_blocks");
  const std::int64_t n = xv.dim(0), r = xv.dim(1), t = xv.dim(2), c = xv.dim(3);
  if (static_cast<std::int64_t>(index.size()) != n * r * k) throw ShapeError("gather_blocks: index size mismatch");
  for (auto id : index) {
    if (id < 0 || id >= r) throw ShapeError("gather_blocks: block id out of range");
  }
  auto idx = std::make_shared<std::vector<std::int32_t>>(index.begin(), index.end());
  NdTensor<T> out({n, r, k * t, c});
  const std::int64_t block = t * c;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t q = 0; q < r; ++q)
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t src = (*idx)[static_cast<std::size_t>((b * r + q) * k + j)];
        std::copy_n(xv.ptr() + (b * r + src) * block, block, out.ptr() + ((b * r + q) * k + j) * block);
      }
  const std::size_t xid = x.id();
  return x.graph().record("gather_blocks", std::move(out), {xid}, [=](Graph<T>& g, std::size_t self) {
    const NdTensor<T>& gy = g.grad(self);
    NdTensor<T>& gx = g.grad(xid);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t q = 0; q < r; ++q)
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t src = (*idx)[static_cast<std::size_t>((b * r + q) * k + j)];
          T* dst = gx.ptr() + (b * r + src) * block;
          const T* from = gy.ptr() + ((b * r + q) * k + j) * block;
          for (std::int64_t i = 0; i < block; ++i) dst[i] += from[i];
        }
  });
}

#define BGF_INSTANTIATE(T)                                                                              \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, const Conv2dOptions&);                 \
  template Var<T> upsample_nearest2x(Var<T>);                                                          \
  template Var<T> max_pool2d(Var<T>, std::int64_t, std::int64_t, std::int64_t);                        \
  template Var<T> softmax(Var<T>, std::int64_t);                                                       \
  template Var<T> matmul(Var<T>, Var<T>);                                                              \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                       \
  template Var<T> sigmoid(Var<T>);                                                                     \
  template Var<T> silu(Var<T>);                                                                        \
  template Var<T> relu(Var<T>);                                                                        \
  template Var<T> hardswish(Var<T>);                                                                   \
  template Var<T> add(Var<T>, Var<T>);                                                                 \
  template Var<T> sub(Var<T>, Var<T>);                                                                 \
  template Var<T> mul(Var<T>, Var<T>);                                                                 \
  template Var<T> scale(Var<T>, T);                                                                    \
  template Var<T> concat(const std::vector<Var<T>>&, std::int64_t);                                    \
  template std::vector<Var<T>> split(Var<T>, std::int64_t, const std::vector<std::int64_t>&);           \
  template Var<T> mean(Var<T>, std::int64_t, bool);                                                    \
  template Var<T> max_reduce(Var<T>, std::int64_t, bool);                                              \
  template Var<T> sum(Var<T>);                                                                         \
  template Var<T> reshape(Var<T>, Shape);                                                              \
  template Var<T> permute(Var<T>, const std::vector<std::int64_t>&);                                   \
  template Var<T> transpose(Var<T>, std::int64_t, std::int64_t);                                       \
  template Var<T> batchnorm2d(Var<T>, Var<T>, Var<T>, BatchNormBuffers<T>&, const BatchNormOptions&);  \
  template Var<T> gather_blocks(Var<T>, std::span<const std::int32_t>, std::int64_t);
BGF_INSTANTIATE(float)
BGF_INSTANTIATE(double)
#undef BGF_INSTANTIATE

}  // namespace bgf::ops
