#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>

#include "bgf/autograd.hpp"

namespace bgf {

template <typename T>
struct TensorVisitor {
  std::function<void(Parameter<T>&)> on_parameter;
  std::function<void(const std::string&, NdTensor<T>&)> on_buffer;
};

// A block with owned parameters mapping one feature map to another.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var<T> forward(Var<T> x) = 0;
  virtual void visit(const TensorVisitor<T>& v) = 0;

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    visit({[&n](Parameter<T>& p) { n += p.value.numel(); }, nullptr});
    return n;
  }
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
NdTensor<T> fan_in_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng);

}  // namespace bgf
