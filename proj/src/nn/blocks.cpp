#include "bgf/blocks.hpp"

#include <cmath>

namespace bgf {

template <typename T>
NdTensor<T> fan_in_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(std::max<std::int64_t>(fan_in, 1)));
  return NdTensor<T>::uniform(std::move(shape), rng, -bound, bound);
}

template NdTensor<float> fan_in_uniform(Shape, std::int64_t, std::mt19937_64&);
template NdTensor<double> fan_in_uniform(Shape, std::int64_t, std::mt19937_64&);

template <typename T>
ConvBlock<T>::ConvBlock(const std::string& name_, std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                        std::int64_t stride, std::mt19937_64& rng, ops::BatchNormOptions bn)
    : name(name_), c_in_(c_in), c_out_(c_out), kernel_(kernel), stride_(stride), bn_opt_(bn) {
  if (c_in <= 0 || c_out <= 0 || kernel <= 0 || stride <= 0) throw ShapeError("CBS " + name_ + ": invalid geometry");
  weight = Parameter<T>(name_ + ".conv.weight", fan_in_uniform<T>({c_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng));
  bn_gamma = Parameter<T>(name_ + ".bn.weight", NdTensor<T>::ones({c_out}));
  bn_beta = Parameter<T>(name_ + ".bn.bias", NdTensor<T>::zeros({c_out}));
  bn_stats.running_mean = NdTensor<T>::zeros({c_out});
  bn_stats.running_var = NdTensor<T>::ones({c_out});
}

template <typename T>
Var<T> ConvBlock<T>::forward(Var<T> x) {
  if (x.value().rank() != 4 || x.dim(1) != c_in_) {
    throw ShapeError("CBS " + name + ": expected " + std::to_string(c_in_) + " input channels, got " +
                     shape_str(x.shape()));
  }
  Graph<T>& g = x.graph();
  Var<T> y = ops::conv2d<T>(x, g.parameter(weight), std::nullopt, stride_, kernel_ / 2);
  y = ops::batchnorm2d(y, g.parameter(bn_gamma), g.parameter(bn_beta), bn_stats, bn_opt_);
  return ops::silu(y);
}

template <typename T>
void ConvBlock<T>::visit(const TensorVisitor<T>& v) {
  if (v.on_parameter) {
    v.on_parameter(weight);
    v.on_parameter(bn_gamma);
    v.on_parameter(bn_beta);
  }
  if (v.on_buffer) {
    v.on_buffer(name + ".bn.running_mean", bn_stats.running_mean);
    v.on_buffer(name + ".bn.running_var", bn_stats.running_var);
  }
}

template <typename T>
Bottleneck<T>::Bottleneck(const std::string& name, std::int64_t channels, bool shortcut_, std::mt19937_64& rng)
    : cv1(name + ".cv1", channels, channels, 3, 1, rng), cv2(name + ".cv2", channels, channels, 3, 1, rng),
      shortcut(shortcut_) {}

template <typename T>
Var<T> Bottleneck<T>::forward(Var<T> x) {
  Var<T> y = cv2.forward(cv1.forward(x));
  return shortcut ? ops::add(x, y) : y;
}

template <typename T>
void Bottleneck<T>::visit(const TensorVisitor<T>& v) {
  cv1.visit(v);
  cv2.visit(v);
}

namespace {
std::int64_t half_width(const std::string& name, std::int64_t c_out) {
  if (c_out <= 0 || c_out % 2 != 0) {
    throw ShapeError(name + ": output channels " + std::to_string(c_out) + " give an odd split width");
  }
  return c_out / 2;
}
}  // namespace

template <typename T>
C2f<T>::C2f(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::int64_t n, bool shortcut,
            std::mt19937_64& rng)
    : hidden(half_width(name, c_out)),
      cv1(name + ".cv1", c_in, 2 * hidden, 1, 1, rng),
      cv2(name + ".cv2", (2 + n) * hidden, c_out, 1, 1, rng) {
  if (n < 1) throw ShapeError(name + ": repeats must be >= 1");
  for (std::int64_t i = 0; i < n; ++i) {
    blocks.push_back(std::make_unique<Bottleneck<T>>(name + ".m" + std::to_string(i), hidden, shortcut, rng));
  }
}

template <typename T>
Var<T> C2f<T>::forward(Var<T> x) {
  std::vector<Var<T>> ys = ops::split(cv1.forward(x), 1, {hidden, hidden});
  for (auto& b : blocks) ys.push_back(b->forward(ys.back()));
  return cv2.forward(ops::concat(ys, 1));
}

template <typename T>
void C2f<T>::visit(const TensorVisitor<T>& v) {
  cv1.visit(v);
  for (auto& b : blocks) b->visit(v);
  cv2.visit(v);
}

template <typename T>
std::int64_t C2f<T>::count(std::int64_t c_in, std::int64_t c_out, std::int64_t n) {
  const std::int64_t h = c_out / 2;
  return ConvBlock<T>::count(c_in, 2 * h, 1) + n * Bottleneck<T>::count(h) + ConvBlock<T>::count((2 + n) * h, c_out, 1);
}

template <typename T>
CspBlock<T>::CspBlock(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::int64_t n,
                      std::mt19937_64& rng)
    : hidden(half_width(name, c_out)),
      cv1(name + ".cv1", c_in, hidden, 1, 1, rng),
      cv2(name + ".cv2", c_in, hidden, 1, 1, rng),
      cv3(name + ".cv3", 2 * hidden, c_out, 1, 1, rng) {
  if (n < 1) throw ShapeError(name + ": repeats must be >= 1");
  for (std::int64_t i = 0; i < n; ++i) {
    blocks.push_back(std::make_unique<Bottleneck<T>>(name + ".m" + std::to_string(i), hidden, true, rng));
  }
}

template <typename T>
Var<T> CspBlock<T>::forward(Var<T> x) {
  Var<T> a = cv1.forward(x);
  Var<T> b = cv2.forward(x);
  for (auto& blk : blocks) b = blk->forward(b);
  return cv3.forward(ops::concat<T>({a, b}, 1));
}

template <typename T>
void CspBlock<T>::visit(const TensorVisitor<T>& v) {
  cv1.visit(v);
  cv2.visit(v);
  for (auto& b : blocks) b->visit(v);
  cv3.visit(v);
}

template <typename T>
std::int64_t CspBlock<T>::count(std::int64_t c_in, std::int64_t c_out, std::int64_t n) {
  const std::int64_t h = c_out / 2;
  return 2 * ConvBlock<T>::count(c_in, h, 1) + n * Bottleneck<T>::count(h) + ConvBlock<T>::count(2 * h, c_out, 1);
}

template <typename T>
Sppf<T>::Sppf(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::mt19937_64& rng, std::int64_t pool_)
    : hidden(std::max<std::int64_t>(c_in / 2, 1)),
      pool(pool_),
      cv1(name + ".cv1", c_in, hidden, 1, 1, rng),
      cv2(name + ".cv2", 4 * hidden, c_out, 1, 1, rng) {}

template <typename T>
Var<T> Sppf<T>::forward(Var<T> x) {
  Var<T> y0 = cv1.forward(x);
  Var<T> y1 = ops::max_pool2d(y0, pool, 1, pool / 2);
  Var<T> y2 = ops::max_pool2d(y1, pool, 1, pool / 2);
  Var<T> y3 = ops::max_pool2d(y2, pool, 1, pool / 2);
  return cv2.forward(ops::concat<T>({y0, y1, y2, y3}, 1));
}

template <typename T>
void Sppf<T>::visit(const TensorVisitor<T>& v) {
  cv1.visit(v);
  cv2.visit(v);
}

template <typename T>
std::int64_t Sppf<T>::count(std::int64_t c_in, std::int64_t c_out) {
  const std::int64_t h = std::max<std::int64_t>(c_in / 2, 1);
  return ConvBlock<T>::count(c_in, h, 1) + ConvBlock<T>::count(4 * h, c_out, 1);
}

template <typename T>
std::unique_ptr<Layer<T>> make_block(const std::string& name, const BlockSpec& s, std::mt19937_64& rng) {
  if (s.repeats < 1) throw ShapeError(name + ": repeats must be >= 1");
  switch (s.kind) {
    case BlockKind::CBS:
      return std::make_unique<ConvBlock<T>>(name, s.channels_in, s.channels_out, s.kernel, s.stride, rng);
    case BlockKind::C2f:
      if (s.shortcut && s.channels_in != s.channels_out) {
        throw ShapeError(name + ": C2f with shortcut needs equal in/out channels");
      }
      return std::make_unique<C2f<T>>(name, s.channels_in, s.channels_out, s.repeats, s.shortcut, rng);
    case BlockKind::CSP:
      return std::make_unique<CspBlock<T>>(name, s.channels_in, s.channels_out, s.repeats, rng);
    case BlockKind::SPPF:
      return std::make_unique<Sppf<T>>(name, s.channels_in, s.channels_out, rng);
  }
  throw ShapeError(name + ": unknown block kind");
}

std::int64_t block_parameter_count(const BlockSpec& s) {
  switch (s.kind) {
    case BlockKind::CBS:
      return ConvBlock<double>::count(s.channels_in, s.channels_out, s.kernel);
    case BlockKind::C2f:
      return C2f<double>::count(s.channels_in, s.channels_out, s.repeats);
    case BlockKind::CSP:
      return CspBlock<double>::count(s.channels_in, s.channels_out, s.repeats);
    case BlockKind::SPPF:
      return Sppf<double>::count(s.channels_in, s.channels_out);
  }
  return 0;
}

#define BGF_INSTANTIATE(T)                                                                        \
  template class ConvBlock<T>;                                                                    \
  template class Bottleneck<T>;                                                                   \
  template class C2f<T>;                                                                          \
  template class CspBlock<T>;                                                                     \
  template class Sppf<T>;                                                                         \
  template std::unique_ptr<Layer<T>> make_block<T>(const std::string&, const BlockSpec&, std::mt19937_64&);
BGF_INSTANTIATE(float)
BGF_INSTANTIATE(double)
#undef BGF_INSTANTIATE

}  // namespace bgf
