#pragma once

#include <functional>
#include <vector>

#include "vnmt/tensor.hpp"

namespace vnmt {

/// Max over coordinates of |analytic - central-difference| gradient of a scalar function at x.
/// Throws std::invalid_argument for eps <= 0 and NumericError for non-finite evaluations.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

/// Same check against a set of leaf parameters that `f` reads. The parameters' values are
/// perturbed in place and restored; their gradients are overwritten.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps = 1e-5);

}  // namespace vnmt
