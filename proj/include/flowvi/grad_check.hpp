#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flowvi/nn.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

// Central-difference comparison of reverse-mode gradients.
// Relative error per coordinate: |analytic - numeric| / max(1, |numeric|).
struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_err;
  double max_rel_err = 0.0;
  long worst_coordinate = -1;
  bool ok(double tol) const { return worst_coordinate < 0 || max_rel_err <= tol; }
};

// fn must map a tensor shaped like x to a scalar. If fn throws during a
// perturbed evaluation, the error is rethrown with the coordinate index.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                           double h = 1e-5);

// Same comparison applied parameter-by-parameter to a closed loss function
// (the parameters are perturbed in place, then restored). loss_fn must be
// deterministic between calls.
struct ParamGradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  long worst_coordinate = -1;
};

struct ParamGradCheckReport {
  std::vector<ParamGradCheckEntry> entries;
  double max_rel_err = 0.0;
  std::string worst_param;
  bool ok(double tol) const { return max_rel_err <= tol; }
};

ParamGradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn,
                                       const ParamList& params, double h = 1e-5);

}  // namespace flowvi
