#include "bgf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace bgf {
namespace {

double evaluate(const GradFn& fn, const std::vector<NdTensor<double>>& inputs, bool training) {
  Graph<double> g(training);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  Var<double> out = fn(g, vars);
  if (out.value().numel() != 1) throw GraphError("grad_check: fn must return a scalar");
  return out.value()[0];
}

std::vector<std::int64_t> probe_indices(std::int64_t n, std::size_t max_coords) {
  std::vector<std::int64_t> idx;
  if (max_coords == 0 || static_cast<std::int64_t>(max_coords) >= n) {
    for (std::int64_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  const double step = static_cast<double>(n) / static_cast<double>(max_coords);
  for (std::size_t i = 0; i < max_coords; ++i) idx.push_back(static_cast<std::int64_t>(static_cast<double>(i) * step));
  return idx;
}

}  // namespace

GradCheckReport grad_check(const GradFn& fn, std::vector<NdTensor<double>> inputs,
                           std::span<Parameter<double>* const> params, const GradCheckOptions& opt, bool training) {
  std::vector<NdTensor<double>> analytic;
  {
    for (auto* p : params) p->zero_grad();
    Graph<double> g(training);
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(g.variable(t));
    Var<double> loss = fn(g, vars);
    g.backward(loss);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      analytic.push_back(g.has_grad(vars[i].id()) ? g.grad(vars[i]) : NdTensor<double>(inputs[i].shape()));
    }
  }
  const double base1 = evaluate(fn, inputs, training);
  const double base2 = evaluate(fn, inputs, training);
  if (base1 != base2) throw GraphError("grad_check: fn is not deterministic");

  GradCheckReport rep;
  auto consider = [&](const std::string& name, std::int64_t idx, double a, double num) {
    const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), opt.abs_floor});
    ++rep.coords_checked;
    if (err > rep.max_rel_err || rep.worst_index < 0) {
      rep.max_rel_err = std::max(rep.max_rel_err, err);
      rep.worst_tensor = name;
      rep.worst_index = idx;
      rep.worst_analytic = a;
      rep.worst_numeric = num;
    }
  };

  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (auto i : probe_indices(inputs[t].numel(), opt.max_coords_per_tensor)) {
      const double orig = inputs[t][i];
      inputs[t][i] = orig + opt.eps;
      const double fp = evaluate(fn, inputs, training);
      inputs[t][i] = orig - opt.eps;
      const double fm = evaluate(fn, inputs, training);
      inputs[t][i] = orig;
      consider("input" + std::to_string(t), i, analytic[t][i], (fp - fm) / (2 * opt.eps));
    }
  }
  for (auto* p : params) {
    for (auto i : probe_indices(p->value.numel(), opt.max_coords_per_tensor)) {
      const double orig = p->value[i];
      p->value[i] = orig + opt.eps;
      const double fp = evaluate(fn, inputs, training);
      p->value[i] = orig - opt.eps;
      const double fm = evaluate(fn, inputs, training);
      p->value[i] = orig;
      consider(p->name, i, p->grad[i], (fp - fm) / (2 * opt.eps));
    }
  }
  return rep;
}

}  // namespace bgf
