#include "bgf/autograd.hpp"

namespace bgf {

template <typename T>
Var<T> Graph<T>::constant(NdTensor<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::variable(NdTensor<T> value) {
  Node n;
  n.op = "variable";
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::parameter(Parameter<T>& p) {
  Node n;
  n.op = "parameter:" + p.name;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, NdTensor<T> value, std::vector<std::size_t> parents,
                        BackwardFn backward) {
  if (!value.all_finite()) {
    throw NonFiniteError("non-finite value produced by op '" + std::string(op) + "'");
  }
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  for (auto p : parents) {
    if (p >= nodes_.size()) throw GraphError("op '" + n.op + "' references unknown node");
    n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  }
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
NdTensor<T>& Graph<T>::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.shape().empty()) n.grad = NdTensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
const NdTensor<T>& Graph<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.shape().empty()) throw GraphError("node '" + n.op + "' has no gradient");
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (backward_done_) throw GraphError("backward called twice without reset");
  if (loss.value().numel() != 1) {
    throw GraphError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  backward_done_ = true;
  grad(loss.id()).fill(T(1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.shape().empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      check_same_shape(n.param->grad.shape(), n.grad.shape(), "parameter grad");
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  if (!grad(loss.id()).all_finite()) throw NonFiniteError("non-finite loss gradient");
}

template <typename T>
void Graph<T>::reset() {
  nodes_.clear();
  backward_done_ = false;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace bgf
