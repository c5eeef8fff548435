#include "bgf/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bgf {

template <typename T>
Var<T> region_partition(Var<T> x, std::int64_t grid) {
  if (x.value().rank() != 4) throw ShapeError("region_partition: expected [N,C,H,W]");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (grid < 1 || h % grid != 0 || w % grid != 0) {
    throw ShapeError("region_partition: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by region grid " + std::to_string(grid));
  }
  const std::int64_t rh = h / grid, rw = w / grid;
  Var<T> y = ops::reshape(x, {n, c, grid, rh, grid, rw});
  y = ops::permute(y, {0, 2, 4, 3, 5, 1});
  return ops::reshape(y, {n, grid * grid, rh * rw, c});
}

template <typename T>
Var<T> region_merge(Var<T> regions, std::int64_t grid, std::int64_t height, std::int64_t width) {
  if (regions.value().rank() != 4) throw ShapeError("region_merge: expected [N,R,T,C]");
  const std::int64_t n = regions.dim(0), c = regions.dim(3);
  const std::int64_t rh = height / grid, rw = width / grid;
  if (regions.dim(1) != grid * grid || regions.dim(2) != rh * rw || rh * grid != height || rw * grid != width) {
    throw ShapeError("region_merge: layout " + shape_str(regions.shape()) + " does not match target size");
  }
  Var<T> y = ops::reshape(regions, {n, grid, grid, rh, rw, c});
  y = ops::permute(y, {0, 5, 1, 3, 2, 4});
  return ops::reshape(y, {n, c, height, width});
}

template <typename T>
RoutingIndex topk_routing(const NdTensor<T>& q_region, const NdTensor<T>& k_region, std::int64_t k) {
  if (q_region.rank() != 3 || q_region.shape() != k_region.shape()) {
    throw ShapeError("topk_routing: descriptors must both be [N,R,C]");
  }
  const std::int64_t n = q_region.dim(0), r = q_region.dim(1), c = q_region.dim(2);
  if (k < 1 || k > r) {
    throw ShapeError("topk_routing: k=" + std::to_string(k) + " outside [1, " + std::to_string(r) + "]");
  }
  RoutingIndex out{n, r, k, std::vector<std::int32_t>(static_cast<std::size_t>(n * r * k))};
  std::vector<double> aff(static_cast<std::size_t>(r));
  std::vector<std::int32_t> order(static_cast<std::size_t>(r));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < r; ++i) {
      const T* qi = q_region.ptr() + (b * r + i) * c;
      for (std::int64_t j = 0; j < r; ++j) {
        const T* kj = k_region.ptr() + (b * r + j) * c;
        double a = 0;
        for (std::int64_t ch = 0; ch < c; ++ch) a += static_cast<double>(qi[ch]) * static_cast<double>(kj[ch]);
        aff[static_cast<std::size_t>(j)] = a;
      }
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t bb) {
        return aff[static_cast<std::size_t>(a)] > aff[static_cast<std::size_t>(bb)];
      });
      std::copy_n(order.begin(), k, out.ids.begin() + (b * r + i) * k);
    }
  return out;
}

void BraConfig::validate() const {
  if (channels <= 0) throw ShapeError("BRA: channels must be positive");
  if (heads < 1 || channels % heads != 0) {
    throw ShapeError("BRA: channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  }
  if (region_grid < 1) throw ShapeError("BRA: region grid must be >= 1");
  const std::int64_t k = resolved_topk();
  if (k < 1 || k > region_grid * region_grid) throw ShapeError("BRA: top-k must lie in [1, S*S]");
}

template <typename T>
BiLevelRoutingAttention<T>::BiLevelRoutingAttention(const std::string& name, const BraConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const std::int64_t c = cfg.channels;
  w_q = Parameter<T>(name + ".wq", fan_in_uniform<T>({c, c}, c, rng));
  w_k = Parameter<T>(name + ".wk", fan_in_uniform<T>({c, c}, c, rng));
  w_v = Parameter<T>(name + ".wv", fan_in_uniform<T>({c, c}, c, rng));
  w_o = Parameter<T>(name + ".wo", fan_in_uniform<T>({c, c}, c, rng));
  b_o = Parameter<T>(name + ".bo", NdTensor<T>::zeros({c}));
  if (cfg.local_context) {
    lce_weight = Parameter<T>(name + ".lce.weight", fan_in_uniform<T>({c, 1, 3, 3}, 9, rng));
    lce_bias = Parameter<T>(name + ".lce.bias", NdTensor<T>::zeros({c}));
  }
}

template <typename T>
Var<T> BiLevelRoutingAttention<T>::forward(Var<T> x) {
  if (x.value().rank() != 4 || x.dim(1) != cfg_.channels) {
    throw ShapeError("BRA: expected " + std::to_string(cfg_.channels) + " channels, got " + shape_str(x.shape()));
  }
  Graph<T>& g = x.graph();
  const std::int64_t n = x.dim(0), c = cfg_.channels, h = x.dim(2), w = x.dim(3);
  const std::int64_t s = cfg_.region_grid, regions = s * s, k = cfg_.resolved_topk();
  const std::int64_t heads = cfg_.heads, d = c / heads;
  if (h % s != 0 || w % s != 0) {
    throw ShapeError("BRA: feature map " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by region grid " + std::to_string(s));
  }
  const std::int64_t tokens = (h / s) * (w / s);
  auto project = [&](Parameter<T>& p) {
    return ops::conv2d<T>(x, ops::reshape(g.parameter(p), {c, c, 1, 1}), std::nullopt, 1, 0);
  };
  Var<T> v_img = project(w_v);
  Var<T> q = region_partition(project(w_q), s);
  Var<T> kk = region_partition(project(w_k), s);
  Var<T> vv = region_partition(v_img, s);

  // Region descriptors: token means of Q and K. Routing carries no gradient.
  auto region_mean = [&](const NdTensor<T>& t) {
    NdTensor<T> m({n, regions, c});
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t r = 0; r < regions; ++r) {
        T* dst = m.ptr() + (b * regions + r) * c;
        for (std::int64_t tk = 0; tk < tokens; ++tk) {
          const T* src = t.ptr() + ((b * regions + r) * tokens + tk) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
        for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] /= static_cast<T>(tokens);
      }
    return m;
  };
  last_routing_ = topk_routing(region_mean(q.value()), region_mean(kk.value()), k);

  Var<T> kg = ops::gather_blocks(kk, std::span<const std::int32_t>(last_routing_.ids), k);
  Var<T> vg = ops::gather_blocks(vv, std::span<const std::int32_t>(last_routing_.ids), k);
  const std::int64_t groups = n * regions * heads;
  Var<T> qh = ops::reshape(ops::permute(ops::reshape(q, {n, regions, tokens, heads, d}), {0, 1, 3, 2, 4}),
                           {groups, tokens, d});
  Var<T> kh = ops::reshape(ops::permute(ops::reshape(kg, {n, regions, k * tokens, heads, d}), {0, 1, 3, 4, 2}),
                           {groups, d, k * tokens});
  Var<T> vh = ops::reshape(ops::permute(ops::reshape(vg, {n, regions, k * tokens, heads, d}), {0, 1, 3, 2, 4}),
                           {groups, k * tokens, d});
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  Var<T> attn = ops::softmax(ops::scale(ops::matmul(qh, kh), scale), -1);
  Var<T> o = ops::matmul(attn, vh);
  o = ops::reshape(ops::permute(ops::reshape(o, {n, regions, heads, tokens, d}), {0, 1, 3, 2, 4}),
                   {n, regions, tokens, c});
  Var<T> o_img = region_merge(o, s, h, w);
  if (cfg_.local_context) {
    o_img = ops::add(o_img, ops::conv2d<T>(v_img, g.parameter(lce_weight), g.parameter(lce_bias), 1, 1, c));
  }
  Var<T> y = ops::conv2d<T>(o_img, ops::reshape(g.parameter(w_o), {c, c, 1, 1}), g.parameter(b_o), 1, 0);
  return ops::add(x, y);
}

template <typename T>
void BiLevelRoutingAttention<T>::visit(const TensorVisitor<T>& v) {
  if (!v.on_parameter) return;
  v.on_parameter(w_q);
  v.on_parameter(w_k);
  v.on_parameter(w_v);
  v.on_parameter(w_o);
  v.on_parameter(b_o);
  if (cfg_.local_context) {
    v.on_parameter(lce_weight);
    v.on_parameter(lce_bias);
  }
}

namespace {

// [N,C,H,W] -> [N,C] via spatial mean or max.
template <typename T>
Var<T> pool_channels(Var<T> x, bool use_max) {
  const std::int64_t n = x.dim(0), c = x.dim(1);
  Var<T> y = use_max ? ops::max_reduce(ops::max_reduce(x, 3), 2) : ops::mean(ops::mean(x, 3), 2);
  return ops::reshape(y, {n, c});
}

}  // namespace

template <typename T>
SqueezeExcitation<T>::SqueezeExcitation(const std::string& name, std::int64_t channels, std::int64_t reduction,
                                        std::mt19937_64& rng) {
  const std::int64_t hidden = std::max<std::int64_t>(1, channels / std::max<std::int64_t>(reduction, 1));
  w1 = Parameter<T>(name + ".fc1.weight", fan_in_uniform<T>({channels, hidden}, channels, rng));
  b1 = Parameter<T>(name + ".fc1.bias", NdTensor<T>::zeros({hidden}));
  w2 = Parameter<T>(name + ".fc2.weight", fan_in_uniform<T>({hidden, channels}, hidden, rng));
  b2 = Parameter<T>(name + ".fc2.bias", NdTensor<T>::zeros({channels}));
}

template <typename T>
Var<T> SqueezeExcitation<T>::gate(Var<T> x) {
  Graph<T>& g = x.graph();
  Var<T> s = pool_channels(x, false);
  s = ops::relu(ops::linear(s, g.parameter(w1), g.parameter(b1)));
  s = ops::sigmoid(ops::linear(s, g.parameter(w2), g.parameter(b2)));
  return ops::reshape(s, {x.dim(0), x.dim(1), 1, 1});
}

template <typename T>
Var<T> SqueezeExcitation<T>::forward(Var<T> x) {
  return ops::mul(x, gate(x));
}

template <typename T>
void SqueezeExcitation<T>::visit(const TensorVisitor<T>& v) {
  if (!v.on_parameter) return;
  for (auto* p : {&w1, &b1, &w2, &b2}) v.on_parameter(*p);
}

template <typename T>
std::int64_t EfficientChannelAttention<T>::kernel_for_channels(std::int64_t channels) {
  const auto t = static_cast<std::int64_t>(std::abs(std::log2(static_cast<double>(channels)) / 2.0 + 0.5));
  const std::int64_t k = t % 2 ? t : t + 1;
  return std::max<std::int64_t>(k, 3);
}

template <typename T>
EfficientChannelAttention<T>::EfficientChannelAttention(const std::string& name, std::int64_t channels,
                                                        std::int64_t kernel_, std::mt19937_64& rng)
    : kernel(kernel_ > 0 ? kernel_ : kernel_for_channels(channels)) {
  if (kernel % 2 == 0) throw ShapeError(name + ": ECA kernel must be odd");
  weight = Parameter<T>(name + ".conv.weight", fan_in_uniform<T>({1, 1, 1, kernel}, kernel, rng));
}

template <typename T>
Var<T> EfficientChannelAttention<T>::gate(Var<T> x) {
  const std::int64_t n = x.dim(0), c = x.dim(1);
  Var<T> s = ops::reshape(pool_channels(x, false), {n, 1, 1, c});
  s = ops::conv2d<T>(s, x.graph().parameter(weight), std::nullopt, ops::Conv2dOptions{1, 1, 0, kernel / 2, 1});
  return ops::reshape(ops::sigmoid(s), {n, c, 1, 1});
}

template <typename T>
Var<T> EfficientChannelAttention<T>::forward(Var<T> x) {
  return ops::mul(x, gate(x));
}

template <typename T>
void EfficientChannelAttention<T>::visit(const TensorVisitor<T>& v) {
  if (v.on_parameter) v.on_parameter(weight);
}

template <typename T>
Cbam<T>::Cbam(const std::string& name, std::int64_t channels, std::int64_t reduction, std::int64_t spatial_kernel_,
              std::mt19937_64& rng)
    : spatial_kernel(spatial_kernel_) {
  if (spatial_kernel % 2 == 0) throw ShapeError(name + ": CBAM spatial kernel must be odd");
  const std::int64_t hidden = std::max<std::int64_t>(1, channels / std::max<std::int64_t>(reduction, 1));
  w1 = Parameter<T>(name + ".mlp1.weight", fan_in_uniform<T>({channels, hidden}, channels, rng));
  b1 = Parameter<T>(name + ".mlp1.bias", NdTensor<T>::zeros({hidden}));
  w2 = Parameter<T>(name + ".mlp2.weight", fan_in_uniform<T>({hidden, channels}, hidden, rng));
  b2 = Parameter<T>(name + ".mlp2.bias", NdTensor<T>::zeros({channels}));
  spatial_weight = Parameter<T>(name + ".spatial.weight",
                                fan_in_uniform<T>({1, 2, spatial_kernel, spatial_kernel}, 2 * spatial_kernel * spatial_kernel, rng));
}

template <typename T>
Var<T> Cbam<T>::forward(Var<T> x) {
  Graph<T>& g = x.graph();
  const std::int64_t n = x.dim(0), c = x.dim(1);
  Var<T> pw1 = g.parameter(w1), pb1 = g.parameter(b1), pw2 = g.parameter(w2), pb2 = g.parameter(b2);
  auto mlp = [&](Var<T> s) { return ops::linear(ops::relu(ops::linear(s, pw1, pb1)), pw2, pb2); };
  Var<T> mc = ops::sigmoid(ops::add(mlp(pool_channels(x, false)), mlp(pool_channels(x, true))));
  Var<T> x1 = ops::mul(x, ops::reshape(mc, {n, c, 1, 1}));
  Var<T> maps = ops::concat<T>({ops::mean(x1, 1), ops::max_reduce(x1, 1)}, 1);
  Var<T> ms = ops::sigmoid(ops::conv2d<T>(maps, g.parameter(spatial_weight), std::nullopt, 1, spatial_kernel / 2));
  return ops::mul(x1, ms);
}

template <typename T>
void Cbam<T>::visit(const TensorVisitor<T>& v) {
  if (!v.on_parameter) return;
  for (auto* p : {&w1, &b1, &w2, &b2, &spatial_weight}) v.on_parameter(*p);
}

template <typename T>
CoordinateAttention<T>::CoordinateAttention(const std::string& name_, std::int64_t channels, std::int64_t reduction,
                                            std::mt19937_64& rng)
    : mip(std::max<std::int64_t>(8, channels / std::max<std::int64_t>(reduction, 1))), name(name_) {
  conv1_w = Parameter<T>(name + ".conv1.weight", fan_in_uniform<T>({mip, channels, 1, 1}, channels, rng));
  conv1_b = Parameter<T>(name + ".conv1.bias", NdTensor<T>::zeros({mip}));
  bn_gamma = Parameter<T>(name + ".bn.weight", NdTensor<T>::ones({mip}));
  bn_beta = Parameter<T>(name + ".bn.bias", NdTensor<T>::zeros({mip}));
  bn_stats.running_mean = NdTensor<T>::zeros({mip});
  bn_stats.running_var = NdTensor<T>::ones({mip});
  conv_h_w = Parameter<T>(name + ".conv_h.weight", fan_in_uniform<T>({channels, mip, 1, 1}, mip, rng));
  conv_h_b = Parameter<T>(name + ".conv_h.bias", NdTensor<T>::zeros({channels}));
  conv_w_w = Parameter<T>(name + ".conv_w.weight", fan_in_uniform<T>({channels, mip, 1, 1}, mip, rng));
  conv_w_b = Parameter<T>(name + ".conv_w.bias", NdTensor<T>::zeros({channels}));
}

template <typename T>
Var<T> CoordinateAttention<T>::forward(Var<T> x) {
  Graph<T>& g = x.graph();
  const std::int64_t h = x.dim(2), w = x.dim(3);
  Var<T> xh = ops::mean(x, 3);                         // [N,C,H,1]
  Var<T> xw = ops::permute(ops::mean(x, 2), {0, 1, 3, 2});  // [N,C,W,1]
  Var<T> y = ops::conv2d<T>(ops::concat<T>({xh, xw}, 2), g.parameter(conv1_w), g.parameter(conv1_b), 1, 0);
  y = ops::hardswish(ops::batchnorm2d(y, g.parameter(bn_gamma), g.parameter(bn_beta), bn_stats, {}));
  auto parts = ops::split(y, 2, {h, w});
  Var<T> ah = ops::sigmoid(ops::conv2d<T>(parts[0], g.parameter(conv_h_w), g.parameter(conv_h_b), 1, 0));
  Var<T> aw = ops::sigmoid(ops::conv2d<T>(ops::permute(parts[1], {0, 1, 3, 2}), g.parameter(conv_w_w),
                                          g.parameter(conv_w_b), 1, 0));
  return ops::mul(ops::mul(x, ah), aw);
}

template <typename T>
void CoordinateAttention<T>::visit(const TensorVisitor<T>& v) {
  if (v.on_parameter) {
    for (auto* p : {&conv1_w, &conv1_b, &bn_gamma, &bn_beta, &conv_h_w, &conv_h_b, &conv_w_w, &conv_w_b}) {
      v.on_parameter(*p);
    }
  }
  if (v.on_buffer) {
    v.on_buffer(name + ".bn.running_mean", bn_stats.running_mean);
    v.on_buffer(name + ".bn.running_var", bn_stats.running_var);
  }
}

const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::BRA: return "BRA";
    case AttentionKind::SE: return "SE";
    case AttentionKind::ECA: return "ECA";
    case AttentionKind::CBAM: return "CBAM";
    case AttentionKind::CA: return "CA";
  }
  return "?";
}

AttentionKind parse_attention_kind(const std::string& s) {
  for (auto k : {AttentionKind::BRA, AttentionKind::SE, AttentionKind::ECA, AttentionKind::CBAM, AttentionKind::CA}) {
    if (s == attention_kind_name(k)) return k;
  }
  throw Error("unknown attention variant '" + s + "'");
}

char attention_letter(AttentionKind k) {
  switch (k) {
    case AttentionKind::BRA: return 'B';
    case AttentionKind::SE: return 'S';
    case AttentionKind::ECA: return 'E';
    case AttentionKind::CBAM: return 'C';
    case AttentionKind::CA: return 'A';
  }
  return '?';
}

template <typename T>
std::unique_ptr<Layer<T>> make_attention(const std::string& name, AttentionKind kind, std::int64_t channels,
                                         const AttentionConfig& cfg, std::mt19937_64& rng) {
  switch (kind) {
    case AttentionKind::BRA: {
      BraConfig b = cfg.bra;
      b.channels = channels;
      return std::make_unique<BiLevelRoutingAttention<T>>(name, b, rng);
    }
    case AttentionKind::SE:
      return std::make_unique<SqueezeExcitation<T>>(name, channels, cfg.se_reduction, rng);
    case AttentionKind::ECA:
      return std::make_unique<EfficientChannelAttention<T>>(name, channels, cfg.eca_kernel, rng);
    case AttentionKind::CBAM:
      return std::make_unique<Cbam<T>>(name, channels, cfg.cbam_reduction, cfg.cbam_kernel, rng);
    case AttentionKind::CA:
      return std::make_unique<CoordinateAttention<T>>(name, channels, cfg.ca_reduction, rng);
  }
  throw Error("unknown attention kind");
}

#define BGF_INSTANTIATE(T)                                                                                   \
  template Var<T> region_partition(Var<T>, std::int64_t);                                                    \
  template Var<T> region_merge(Var<T>, std::int64_t, std::int64_t, std::int64_t);                            \
  template RoutingIndex topk_routing(const NdTensor<T>&, const NdTensor<T>&, std::int64_t);                  \
  template class BiLevelRoutingAttention<T>;                                                                 \
  template class SqueezeExcitation<T>;                                                                       \
  template class EfficientChannelAttention<T>;                                                               \
  template class Cbam<T>;                                                                                    \
  template class CoordinateAttention<T>;                                                                     \
  template std::unique_ptr<Layer<T>> make_attention<T>(const std::string&, AttentionKind, std::int64_t,      \
                                                       const AttentionConfig&, std::mt19937_64&);
BGF_INSTANTIATE(float)
BGF_INSTANTIATE(double)
#undef BGF_INSTANTIATE

}  // namespace bgf
