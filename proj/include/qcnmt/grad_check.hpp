#pragma once

#include <functional>
#include <vector>

#include "qcnmt/tensor.hpp"

namespace qcnmt {

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences. `f` must rebuild its graph from the given parameter
// tensors on every call (their buffers are perturbed in place). Returns the
// maximum over all parameter entries of
//   |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double epsilon = 1e-4);

}  // namespace qcnmt
