#pragma once

#include <functional>
#include <vector>

#include "adp/tensor.hpp"

namespace adp {

// Central-difference gradient of a scalar-valued function:
// g[i] = (f(x + h e_i) - f(x - h e_i)) / (2h). The function must be
// deterministic and finite at every perturbed point; evaluations run without
// an active tape.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h = 1e-5);

// Compares reverse-mode gradients of `loss_fn` against finite differences for
// every leaf. Returns the worst per-leaf relative error
// ||g_ad - g_fd|| / max(||g_ad|| + ||g_fd||, 1e-12).
double gradcheck_max_rel_error(
    const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn, std::vector<Tensor> leaves,
    double h = 1e-5);

}  // namespace adp
