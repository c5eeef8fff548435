#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "bgf/tensor.hpp"

namespace bgf {

class GraphError : public Error {
 public:
  using Error::Error;
};

// A trainable tensor owned by a block. `grad` accumulates across backward
// passes until zero_grad().
template <typename T>
struct Parameter {
  std::string name;
  NdTensor<T> value;
  NdTensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, NdTensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Graph;

// Handle to a node in a Graph. Cheap to copy; valid until the graph is reset.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  const NdTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(std::size_t i) const { return shape().at(i); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Tape of executed ops. Nodes are appended in execution order, which is a
// topological order; backward walks it once in reverse.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(bool training = false) : training_(training) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }
  void set_training(bool t) { training_ = t; }

  Var<T> constant(NdTensor<T> value);
  Var<T> variable(NdTensor<T> value);
  // The parameter must outlive the graph; its grad receives the result of backward().
  Var<T> parameter(Parameter<T>& p);

  // Appends an op result. requires_grad is inherited from the parents.
  Var<T> record(std::string_view op, NdTensor<T> value, std::vector<std::size_t> parents, BackwardFn backward);

  const NdTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.shape().empty(); }
  // Gradient accumulator of a node, allocated (zeroed) on first access.
  NdTensor<T>& grad(std::size_t id);
  const NdTensor<T>& grad(Var<T> v) const;
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be a scalar.
  void backward(Var<T> loss);
  void reset();

 private:
  struct Node {
    std::string op;
    NdTensor<T> value;
    NdTensor<T> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
  };

  std::vector<Node> nodes_;
  bool training_ = false;
  bool backward_done_ = false;
};

template <typename T>
const NdTensor<T>& Var<T>::value() const {
  return graph_->value(id_);
}

}  // namespace bgf
