#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bgf/autograd.hpp"

namespace bgf {

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates probed per tensor; 0 probes all. A strided subset otherwise.
  std::size_t max_coords_per_tensor = 0;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-3;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

using GradFn = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

// Compares reverse-mode gradients of a scalar-valued fn against central
// differences, for each input tensor and each listed parameter. Throws
// GraphError when fn is not deterministic at the base point.
GradCheckReport grad_check(const GradFn& fn, std::vector<NdTensor<double>> inputs,
                           std::span<Parameter<double>* const> params = {}, const GradCheckOptions& opt = {},
                           bool training = true);

}  // namespace bgf
